"""Experiment orchestration and reporting.

Everything here is driven by an :class:`ExperimentConfig` plus a list of
node datasets; ``(config, seed)`` determines every emitted number.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .metrics import OMEGA_TASKS, compute_metrics, improvement_pct, normalize_metrics, omega
from .models import ARCHITECTURES, ArchitectureConfig, count_params, enumerate_params
from .scenario import PRESETS, NodeDataset, build_datasets, load_datasets, standardization
from .tasks import TASK_ORDER, TASKS
from .topology import TopologyConfig, TrainConfig, run_topology
from .weighting import STRATEGIES

__all__ = [
    "ExperimentConfig", "MetricsReport", "SweepTable", "compute_metrics", "omega", "load_config",
    "resolve_dataset", "run_experiment", "sweep_design_space", "grouping_sweep", "sparsify",
    "param_report", "topology_comparison", "emit_report", "read_report", "improvement_table",
]

OMEGA_NOTE = "omega: Acc_IN + Acc_LOS - MAE_SC - MAE_PS with MAE terms in normalized training units"
SWEEP_ARCHITECTURES = ("HPS", "MMoE", "DSelectK", "CGC")

# published trainable-parameter counts, kept for the discrepancy notes
REFERENCE_COUNTS = {"HPS": 16406, "CGC": 62650, "STL:SC": 9737, "STL:PS": 6657, "STL:IN": 5633, "STL:LOS": 9737}


# -- configuration ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str = "desk"  # preset name or a directory written by ``generate``
    data_seed: int = 0
    seed: int = 0
    architecture: str = "CGC"
    arch_options: dict = field(default_factory=dict)
    weighting: str = "UW"
    weighting_params: dict = field(default_factory=dict)
    topology: dict = field(default_factory=lambda: {"mode": "local"})
    tasks: tuple = TASK_ORDER
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    train_fraction: float = 1.0
    repeats: int = 3
    workers: int = 1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("active task set must be nonempty")
        unknown = [t for t in self.tasks if t not in TASKS]
        if unknown:
            raise ValueError(f"unknown tasks {unknown}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.weighting not in STRATEGIES:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.repeats < 1 or self.epochs < 0:
            raise ValueError("repeats must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    def arch(self) -> ArchitectureConfig:
        return ArchitectureConfig(self.architecture, self.tasks, **self.arch_options)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weighting=self.weighting, weighting_params=dict(self.weighting_params))

    def topology_config(self) -> TopologyConfig:
        opts = dict(self.topology)
        return TopologyConfig.default(opts.pop("mode", "local"), **opts)


def load_config(path) -> ExperimentConfig:
    """Read an experiment config from YAML or JSON."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(data)


def resolve_dataset(ref: str, seed: int = 0) -> list[NodeDataset]:
    """A preset name builds the dataset; anything else is a directory to load."""
    if ref in PRESETS:
        return build_datasets(PRESETS[ref], seed)
    path = Path(ref)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset {ref!r} is neither a preset {sorted(PRESETS)} nor a directory")
    return load_datasets(path)


# -- reports -------------------------------------------------------------------------

SERIES_FIELDS = ("experiment", "repeat", "mode", "node", "task", "round", "epoch", "metric", "value", "comm_bytes")
FINAL_FIELDS = ("experiment", "repeat", "node", "task", "split", "value", "normalized")
_INT_FIELDS = {"repeat", "round", "epoch", "comm_bytes"}
_FLOAT_FIELDS = {"value", "normalized"}


def _check_metric(task: str, value: float) -> None:
    if TASKS[task].metric == "mae" and value < 0:
        raise ValueError(f"negative MAE for {task}: {value}")
    if TASKS[task].metric == "accuracy" and not 0.0 <= value <= 1.0:
        raise ValueError(f"accuracy for {task} outside [0, 1]: {value}")


@dataclass
class MetricsReport:
    """Append-only record of one or more experiments."""

    header: dict = field(default_factory=lambda: {"omega": OMEGA_NOTE})
    series: list[dict] = field(default_factory=list)
    finals: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add_series(self, rows: Iterable[dict]) -> None:
        for r in rows:
            if r["metric"] == "val_metric":
                _check_metric(r["task"], r["value"])
            self.series.append({k: r[k] for k in SERIES_FIELDS})

    def add_final(self, row: dict) -> None:
        _check_metric(row["task"], row["value"])
        self.finals.append({k: row[k] for k in FINAL_FIELDS})

    def extend(self, other: "MetricsReport") -> None:
        self.series.extend(other.series)
        self.finals.extend(other.finals)
        self.summary.update(other.summary)

    def experiments(self) -> list[str]:
        return list(dict.fromkeys(r["experiment"] for r in self.finals))

    def final_means(self, experiment: str, normalized: bool = False) -> dict[str, float]:
        key = "normalized" if normalized else "value"
        out: dict[str, list[float]] = {}
        for r in self.finals:
            if r["experiment"] == experiment:
                out.setdefault(r["task"], []).append(r[key])
        return {t: float(np.mean(v)) for t, v in out.items()}

    def to_dict(self) -> dict:
        return {"header": self.header, "series": self.series, "finals": self.finals, "summary": self.summary}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(dict(d["header"]), list(d["series"]), list(d["finals"]), dict(d["summary"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def improvement_table(report: MetricsReport, baseline: str = "STL_local") -> dict[str, dict[str, float]]:
    """Percent improvement of each experiment's mean test metric over ``baseline``."""
    if baseline not in report.experiments():
        return {}
    base = report.final_means(baseline)
    table = {}
    for exp in report.experiments():
        means = report.final_means(exp)
        table[exp] = {t: improvement_pct(t, v, base[t]) for t, v in means.items() if t in base}
    return table


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict], note: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {note}\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _read_csv(path: Path, columns: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for raw in csv.DictReader(lines):
        row = {}
        for k in columns:
            v = raw[k]
            row[k] = int(v) if k in _INT_FIELDS else float(v) if k in _FLOAT_FIELDS else v
        rows.append(row)
    return rows


def emit_report(report: MetricsReport, out_dir, baseline: str = "STL_local") -> list[Path]:
    """Write ``series.csv``, ``finals.csv`` (with improvement column) and ``summary.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        improvements = improvement_table(report, baseline)
        finals = []
        for r in report.finals:
            imp = improvements.get(r["experiment"], {}).get(r["task"])
            finals.append({**r, f"improvement_vs_{baseline}_pct": "" if imp is None else imp})
        paths = [out / "series.csv", out / "finals.csv", out / "summary.json"]
        _write_csv(paths[0], SERIES_FIELDS, report.series, report.header["omega"])
        _write_csv(paths[1], FINAL_FIELDS + (f"improvement_vs_{baseline}_pct",), finals, report.header["omega"])
        summary = {"header": report.header, "summary": report.summary, "improvement_pct": improvements,
                   "baseline": baseline}
        paths[2].write_text(json.dumps(summary, sort_keys=True, indent=1))
    except OSError as exc:
        raise OSError(f"could not write report to {out}: {exc}") from exc
    return paths


def read_report(out_dir) -> MetricsReport:
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    return MetricsReport(summary["header"], _read_csv(out / "series.csv", SERIES_FIELDS),
                         _read_csv(out / "finals.csv", FINAL_FIELDS), summary["summary"])


# -- data manipulation -----------------------------------------------------------------


def sparsify(nodes: Sequence[NodeDataset], fraction: float, seed: int = 0) -> list[NodeDataset]:
    """Subsample every train split without replacement; val/test untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    out = []
    for n in nodes:
        train = n.splits["train"]
        keep = int(np.floor(len(train) * fraction + 1e-9))
        if keep < 1:
            raise ValueError(f"{n.node_id}: fraction {fraction} of {len(train)} leaves no samples")
        if keep == len(train):
            out.append(n)
            continue
        rng = np.random.default_rng([seed, n.city, n.bs])
        idx = np.sort(rng.choice(len(train), size=keep, replace=False))
        sub = train.take(idx)
        mean, std = standardization(sub.x)
        out.append(replace(n, splits={**n.splits, "train": sub}, mean=mean, std=std))
    return out


# -- single experiment ------------------------------------------------------------------


def _final_rows(run, nodes, name, repeat) -> list[dict]:
    rows = []
    for n in nodes:
        model = run.learners[n.node_id].model
        phys = compute_metrics(model, n, "test")
        normed = normalize_metrics(phys)
        for t in model.tasks:
            rows.append({"experiment": name, "repeat": repeat, "node": n.node_id, "task": t,
                         "split": "test", "value": phys[t], "normalized": normed[t]})
    return rows


def run_experiment(cfg: ExperimentConfig, nodes: Sequence[NodeDataset] | None = None,
                   name: str | None = None, log_dir=None) -> MetricsReport:
    """All repeats of one configuration; repeat ``r`` uses seed ``cfg.seed + r``."""
    name = name or cfg.name
    if nodes is None:
        nodes = resolve_dataset(cfg.dataset, cfg.data_seed)
    if cfg.train_fraction < 1.0:
        nodes = sparsify(nodes, cfg.train_fraction, cfg.seed)
    arch, train, topo = cfg.arch(), cfg.train_config(), cfg.topology_config()
    report = MetricsReport()
    comm, wall = [], []
    if log_dir:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    for r in range(cfg.repeats):
        t0 = time.perf_counter()
        log = Path(log_dir) / f"{name}_r{r}.jsonl" if log_dir else None
        run = run_topology(topo, nodes, arch, train, seed=cfg.seed + r, log_path=log)
        report.add_series({**rec, "experiment": name, "repeat": r} for rec in run.records)
        for row in _final_rows(run, [n for n in nodes if n.node_id in run.learners], name, r):
            report.add_final(row)
        comm.append(run.comm_bytes)
        wall.append(time.perf_counter() - t0)
    counts = count_params(arch)
    omegas = _run_omegas(report.finals, name)
    report.summary[name] = {
        "config": cfg.to_dict(),
        "params": counts["total"],
        "params_shared": counts["shared"],
        "comm_bytes": comm,
        "wall_clock_s": wall,
        "omega_mean": float(np.mean(omegas)) if omegas else None,
    }
    return report


def _run_omegas(finals: list[dict], experiment: str) -> list[float]:
    per_run: dict[tuple, dict] = {}
    for r in finals:
        if r["experiment"] == experiment:
            per_run.setdefault((r["repeat"], r["node"]), {})[r["task"]] = r["normalized"]
    return [omega(m) for m in per_run.values() if all(t in m for t in OMEGA_TASKS)]


# -- design-space sweep ------------------------------------------------------------------


SWEEP_FIELDS = ("architecture", "weighting", "runs", "omega_mean", "omega_std", "omega_min", "omega_q25",
                "omega_median", "omega_q75", "omega_max", "val_loss_epoch1_mean", "val_loss_final_mean",
                "converged_runs", "params", "wall_clock_s")


@dataclass
class SweepTable:
    rows: list[dict]
    runs: list[dict]  # one entry per (cell, repeat, node)

    def ranked(self, key: str = "omega_q25") -> list[dict]:
        return sorted(self.rows, key=lambda r: -r[key])

    def cell(self, architecture: str, weighting: str) -> dict:
        for r in self.rows:
            if r["architecture"] == architecture and r["weighting"] == weighting:
                return r
        raise KeyError((architecture, weighting))

    def write_csv(self, path) -> Path:
        path = Path(path)
        _write_csv(path, SWEEP_FIELDS, self.ranked(), OMEGA_NOTE)
        return path


def _sweep_cell(job) -> tuple[dict, list[dict]]:
    kind, weighting, nodes, tasks, repeats, seed, train_kw = job
    arch = ArchitectureConfig(kind, tasks)
    train = TrainConfig(weighting=weighting, **train_kw)
    t0 = time.perf_counter()
    runs = []
    for r in range(repeats):
        run = run_topology(TopologyConfig("local"), nodes, arch, train, seed=seed + r)
        losses: dict[tuple[str, int], float] = {}
        for rec in run.records:
            if rec["metric"] == "val_loss":
                key = (rec["node"], rec["epoch"])
                losses[key] = losses.get(key, 0.0) + rec["value"]
        for n in nodes:
            normed = normalize_metrics(compute_metrics(run.learners[n.node_id].model, n, "test"))
            first = losses.get((n.node_id, 1), float("nan"))
            last = losses.get((n.node_id, train.epochs), float("nan"))
            runs.append({"architecture": kind, "weighting": weighting, "repeat": r, "node": n.node_id,
                         "omega": omega(normed), "val_loss_epoch1": first, "val_loss_final": last})
    om = np.array([x["omega"] for x in runs])
    q = np.percentile(om, [0, 25, 50, 75, 100])
    row = {
        "architecture": kind, "weighting": weighting, "runs": len(runs),
        "omega_mean": float(om.mean()), "omega_std": float(om.std()),
        "omega_min": float(q[0]), "omega_q25": float(q[1]), "omega_median": float(q[2]),
        "omega_q75": float(q[3]), "omega_max": float(q[4]),
        "val_loss_epoch1_mean": float(np.mean([x["val_loss_epoch1"] for x in runs])),
        "val_loss_final_mean": float(np.mean([x["val_loss_final"] for x in runs])),
        "converged_runs": int(sum(x["val_loss_final"] <= x["val_loss_epoch1"] for x in runs)),
        "params": count_params(arch)["total"],
        "wall_clock_s": time.perf_counter() - t0,
    }
    return row, runs


def sweep_design_space(
    nodes: Sequence[NodeDataset],
    architectures: Sequence[str] = SWEEP_ARCHITECTURES,
    weightings: Sequence[str] = STRATEGIES,
    repeats: int = 3,
    seed: int = 0,
    epochs: int = 100,
    batch_size: int = 64,
    lr: float = 1e-4,
    workers: int = 1,
    tasks: Sequence[str] = TASK_ORDER,
) -> SweepTable:
    """Local-mode training for every (architecture, weighting) cell.

    Each run is one node's model in one repeat; Ω is computed on its test
    split and summarized per cell with quartiles.
    """
    if not all(t in tasks for t in OMEGA_TASKS):
        raise ValueError("the sweep needs all four tasks for omega")
    train_kw = {"epochs": epochs, "batch_size": batch_size, "lr": lr}
    jobs = [(a, w, list(nodes), tuple(tasks), repeats, seed, train_kw)
            for a, w in itertools.product(architectures, weightings)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    rows = [r for r, _ in results]
    got = {(r["architecture"], r["weighting"]) for r in rows}
    missing = [c for c in itertools.product(architectures, weightings) if c not in got]
    if missing:
        raise RuntimeError(f"sweep is missing cells {missing}")
    return SweepTable(rows, [x for _, runs in results for x in runs])


# -- task grouping -----------------------------------------------------------------------


def all_subsets(tasks: Sequence[str] = TASK_ORDER) -> list[tuple[str, ...]]:
    return [s for k in range(1, len(tasks) + 1) for s in itertools.combinations(tasks, k)]


def grouping_sweep(
    nodes: Sequence[NodeDataset],
    subsets: Sequence[Sequence[str]] | None = None,
    base: ExperimentConfig | None = None,
) -> tuple[list[dict], MetricsReport]:
    """One model per subset (CGC-UW; STL with EW for singletons), local mode.

    Returns rows ``(task, group, value, best)`` with the mean test metric over
    nodes and repeats, and the underlying report.
    """
    base = base or ExperimentConfig(architecture="CGC", weighting="UW")
    subsets = [tuple(s) for s in (subsets or all_subsets())]
    if any(not s for s in subsets):
        raise ValueError("task subsets must be nonempty")
    report = MetricsReport()
    for s in subsets:
        single = len(s) == 1
        cfg = replace(base, tasks=s, architecture="STL" if single else base.architecture,
                      weighting="EW" if single else base.weighting, topology={"mode": "local"})
        report.extend(run_experiment(cfg, nodes, name="+".join(s)))
    rows = []
    for t in TASK_ORDER:
        vals = {"+".join(s): report.final_means("+".join(s))[t] for s in subsets if t in s}
        if not vals:
            continue
        better = min if TASKS[t].metric == "mae" else max
        best = better(vals, key=vals.get)
        rows.extend({"task": t, "group": g, "value": v, "best": g == best} for g, v in vals.items())
    return rows, report


# -- topology comparison ------------------------------------------------------------------

COMPARISON = ("STL_local", "STL_global", "MTL_local", "MTL_global", "FedAlt", "FedSim", "FedVanilla")
_MODES = {"FedAlt": "fed_alt", "FedSim": "fed_sim", "FedVanilla": "fed_vanilla",
          "MTL_local": "local", "MTL_global": "global", "STL_local": "local", "STL_global": "global"}


def topology_comparison(nodes: Sequence[NodeDataset], base: ExperimentConfig | None = None,
                        variants: Sequence[str] = COMPARISON, log_dir=None) -> MetricsReport:
    """STL/MTL in local and global mode plus the three federation schemes.

    MTL variants use ``base`` (CGC-UW by default); STL variants train one
    single-task model per task with equal weighting.
    """
    base = base or ExperimentConfig(architecture="CGC", weighting="UW")
    if base.train_fraction < 1.0:
        nodes = sparsify(nodes, base.train_fraction, base.seed)
        base = replace(base, train_fraction=1.0)
    report = MetricsReport()
    for v in variants:
        if v not in _MODES:
            raise ValueError(f"unknown comparison variant {v!r}")
        topo = {"mode": _MODES[v]}
        if v.startswith("STL"):
            for t in base.tasks:
                cfg = replace(base, architecture="STL", weighting="EW", tasks=(t,), topology=topo)
                part = run_experiment(cfg, nodes, name=v, log_dir=log_dir)
                report.series.extend(part.series)
                report.finals.extend(part.finals)
                report.summary.setdefault(v, {"tasks": {}})["tasks"][t] = part.summary[v]
        else:
            report.extend(run_experiment(replace(base, topology=topo), nodes, name=v, log_dir=log_dir))
    report.summary["improvement_pct"] = improvement_table(report)
    return report


# -- parameter accounting ---------------------------------------------------------------


def param_report(archs: Sequence[ArchitectureConfig] | None = None) -> list[dict]:
    """Analytic counts, enumerated cross-check and reference discrepancies."""
    if archs is None:
        archs = [ArchitectureConfig("STL", (t,)) for t in TASK_ORDER]
        archs += [ArchitectureConfig(k, TASK_ORDER) for k in SWEEP_ARCHITECTURES]
    rows = []
    for a in archs:
        c = count_params(a)
        enumerated = enumerate_params(a)
        if enumerated != c["total"]:
            raise AssertionError(f"{a.kind}: analytic {c['total']} != enumerated {enumerated}")
        key = f"STL:{a.tasks[0]}" if a.kind == "STL" else a.kind
        ref = REFERENCE_COUNTS.get(key) if (a.kind == "STL" or a.tasks == TASK_ORDER) else None
        note = ""
        if ref is not None and ref != c["total"]:
            note = f"reference count {ref} differs by {c['total'] - ref:+d}"
        rows.append({"model": key, "tasks": "+".join(a.tasks), "total": c["total"], "shared": c["shared"],
                     "per_task": c["per_task"], "reference": ref, "note": note})
    return rows
