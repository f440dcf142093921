"""The four RAN tasks and the label <-> training-unit conversions they share."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fixed affine maps from physical label units to training units.
SC_OFFSET_DBM = -80.0
SC_SCALE_DB = 20.0
PS_SCALE_M = 1000.0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    dim: int
    loss: str  # "mse" | "bce"
    metric: str  # "mae" | "accuracy"

    @property
    def is_classification(self) -> bool:
        return self.loss == "bce"


TASKS: dict[str, TaskSpec] = {
    "SC": TaskSpec("SC", 9, "mse", "mae"),
    "PS": TaskSpec("PS", 3, "mse", "mae"),
    "IN": TaskSpec("IN", 1, "bce", "accuracy"),
    "LOS": TaskSpec("LOS", 9, "bce", "accuracy"),
}
TASK_ORDER = ("SC", "PS", "IN", "LOS")


def normalize_tasks(tasks) -> tuple[str, ...]:
    """Validate a task subset and return it in canonical order."""
    tasks = set(tasks)
    unknown = tasks - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}")
    if not tasks:
        raise ValueError("task set must be nonempty")
    return tuple(t for t in TASK_ORDER if t in tasks)


def to_training_units(task: str, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if task == "SC":
        return (y - SC_OFFSET_DBM) / SC_SCALE_DB
    if task == "PS":
        return y / PS_SCALE_M
    if task == "IN":
        return y.reshape(-1, 1)
    return y


def from_training_units(task: str, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if task == "SC":
        return y * SC_SCALE_DB + SC_OFFSET_DBM
    if task == "PS":
        return y * PS_SCALE_M
    if task == "IN":
        return y.reshape(-1)
    return y


def mae_scale(task: str) -> float:
    """Factor converting a training-unit MAE into physical units."""
    return {"SC": SC_SCALE_DB, "PS": PS_SCALE_M}.get(task, 1.0)
