"""Validation/test metrics and the composite objective."""

from __future__ import annotations

import numpy as np

from .scenario import LabelBlock, NodeDataset
from .tasks import TASKS, from_training_units, mae_scale, to_training_units

OMEGA_TASKS = ("IN", "LOS", "SC", "PS")


def split_arrays(node: NodeDataset, split: str, tasks) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Standardized features and training-unit targets for one split."""
    block = node.splits[split]
    return node.features(split), {t: to_training_units(t, block.labels(t)) for t in tasks}


def task_metric(task: str, pred: np.ndarray, target: np.ndarray, normalized: bool = False) -> float:
    """MAE (physical units unless ``normalized``) or binary accuracy at 0.5.

    ``pred`` and ``target`` are in training units.
    """
    if len(target) == 0:
        raise ValueError(f"empty split for task {task}")
    spec = TASKS[task]
    if spec.metric == "mae":
        mae = float(np.mean(np.abs(pred - target)))
        return mae if normalized else mae * mae_scale(task)
    return float(np.mean((pred >= 0.5) == (target >= 0.5)))


def compute_metrics(model, node: NodeDataset | None = None, split: str = "val", tasks=None,
                    arrays=None, normalized: bool = False) -> dict[str, float]:
    """Per-task metric of ``model`` on one split of ``node`` (or given arrays)."""
    tasks = tuple(tasks or model.tasks)
    x, y = arrays if arrays is not None else split_arrays(node, split, tasks)
    if len(x) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = model.predict(x)
    return {t: task_metric(t, pred[t], y[t], normalized) for t in tasks}


def physical_predictions(model, x) -> dict[str, np.ndarray]:
    return {t: from_training_units(t, v) for t, v in model.predict(x).items()}


def omega(metrics: dict[str, float]) -> float:
    """Acc_IN + Acc_LOS - MAE_SC - MAE_PS (MAEs in normalized training units)."""
    missing = [t for t in OMEGA_TASKS if t not in metrics]
    if missing:
        raise KeyError(f"omega needs metrics for {missing}")
    return metrics["IN"] + metrics["LOS"] - metrics["SC"] - metrics["PS"]


def normalize_metrics(metrics: dict[str, float]) -> dict[str, float]:
    """Convert physical-unit MAEs back to training units."""
    return {t: v / mae_scale(t) if TASKS[t].metric == "mae" else v for t, v in metrics.items()}


def improvement_pct(task: str, value: float, baseline: float) -> float:
    """Percent improvement over a baseline; positive means better."""
    if baseline == 0:
        return float("nan")
    if TASKS[task].metric == "mae":
        return 100.0 * (baseline - value) / baseline
    return 100.0 * (value - baseline) / baseline


def block_bytes(block: LabelBlock) -> int:
    return int(sum(a.nbytes for a in (block.x, block.sc, block.ps, block.indoor, block.los)))
