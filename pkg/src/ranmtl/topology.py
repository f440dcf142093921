"""Node-local training and the distributed topologies.

Modes: ``local`` (independent models), ``global`` (one model on pooled
data), ``fed_vanilla`` (full-model averaging from round 0) and the partial
federation schemes ``fed_alt`` / ``fed_sim`` where only shared parameters
travel.  The server is simulated in-process; every exchanged payload is
serialized so the byte ledger is exact.
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamState, NonFiniteError, adam_step
from .metrics import block_bytes, split_arrays, task_metric
from .models import ArchitectureConfig, MTLModel, group_of
from .scenario import NodeDataset
from .weighting import Weighting

MODES = ("local", "global", "fed_vanilla", "fed_alt", "fed_sim")
FEDERATED = ("fed_vanilla", "fed_alt", "fed_sim")
ALL_GROUPS = ("shared", "task")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weighting: str = "EW"
    weighting_params: dict = field(default_factory=dict)

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TopologyConfig:
    mode: str = "local"
    K: int = 1
    tau_initial: int = 0
    tau_tsk: int = 1
    tau_sh: int = 1
    tau_sim: int = 1
    units: str = "epochs"  # or "steps" (minibatch iterations)
    share: str | None = None  # "shared" | "task" | "all"; None -> mode default
    weighted: bool = False  # size-weighted instead of uniform aggregation
    nodes: list[str] | None = None  # participating node ids (None = all)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown topology mode {self.mode!r}")
        if self.mode in FEDERATED and self.K < 1:
            raise ValueError("federated modes need K >= 1")
        for name in ("tau_tsk", "tau_sh", "tau_sim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau_initial < 0:
            raise ValueError("tau_initial must be >= 0")
        if self.units not in ("epochs", "steps"):
            raise ValueError("units must be 'epochs' or 'steps'")
        if self.share is None:
            self.share = "all" if self.mode == "fed_vanilla" else "shared"
        if self.share not in ("shared", "task", "all"):
            raise ValueError(f"unknown share scope {self.share!r}")

    @classmethod
    def default(cls, mode: str, **kw) -> "TopologyConfig":
        presets = {
            "fed_alt": dict(K=5, tau_initial=10, tau_tsk=17, tau_sh=1),
            "fed_sim": dict(K=9, tau_initial=10, tau_sim=10),
            "fed_vanilla": dict(K=10, tau_initial=0, tau_sim=10),
        }
        return cls(mode=mode, **{**presets.get(mode, {}), **kw})

    @property
    def partial(self) -> bool:
        return self.mode in ("fed_alt", "fed_sim") and self.share == "shared"

    def to_dict(self) -> dict:
        return asdict(self)


# -- per-node learner -----------------------------------------------------------


class Learner:
    """A model with its optimizer, weighting strategy and shuffling stream."""

    def __init__(self, arch: ArchitectureConfig, train: TrainConfig, init_seed: int = 0,
                 stream_seed=None, model: MTLModel | None = None):
        self.arch = arch
        self.train_cfg = train
        self.model = model if model is not None else MTLModel(arch, seed=init_seed)
        self.adam = train.adam()
        self.weighting = Weighting(train.weighting, arch.tasks, seed=init_seed, **train.weighting_params)
        self.weighting_adam = train.adam()
        self.rng = np.random.default_rng(stream_seed if stream_seed is not None else [init_seed, 1])
        self.has_reg = arch.kind == "DSelectK"
        params = self.model.params
        self._names = {
            "shared": params.names("shared"),
            "task": params.names("task"),
        }
        self._task_names = {t: params.names(f"task:{t}") for t in arch.tasks}
        self._queue: list[np.ndarray] = []
        self.steps_taken = 0
        self.epochs_taken = 0

    @property
    def params(self):
        return self.model.params

    def names(self, groups: Sequence[str]) -> list[str]:
        return [n for g in ALL_GROUPS if g in groups for n in self._names[g]]

    def step(self, x: np.ndarray, y: dict[str, np.ndarray], groups: Sequence[str] = ALL_GROUPS) -> np.ndarray:
        tasks = self.arch.tasks
        tr = self.model.run(x, y, check=False)
        losses = np.array([float(tr[f"loss:{t}"]) for t in tasks])
        if not np.isfinite(losses).all():
            raise NonFiniteError(f"non-finite training loss {losses}")
        update = self.names(groups)
        w = self.weighting
        if w.kind == "loss":
            _, coef = w.combine(losses)
            seeds = {f"loss:{t}": c for t, c in zip(tasks, coef)}
            if self.has_reg:
                seeds.update({f"reg:{t}": 1.0 for t in tasks})
            grads = tr.backward(seeds, wrt=update)
            if w.params and "task" in groups:
                adam_step(w.params, w.param_grads, self.weighting_adam)
        else:
            grads = self._balanced_grads(tr, losses, groups)
        adam_step(self.params.tensors, grads, self.adam, update)
        self.steps_taken += 1
        return losses

    def _balanced_grads(self, tr, losses, groups) -> dict[str, np.ndarray]:
        shared = self._names["shared"] if "shared" in groups else []
        grads: dict[str, np.ndarray] = {}
        rows = []
        for t in self.arch.tasks:
            own = self._task_names[t] if "task" in groups else []
            seeds = {f"loss:{t}": 1.0}
            if self.has_reg:
                seeds[f"reg:{t}"] = 1.0
            gt = tr.backward(seeds, wrt=shared + own)
            for n in own:
                grads[n] = gt[n]
            if shared:
                rows.append(np.concatenate([gt[n].ravel() for n in shared]))
        if shared:
            direction = self.weighting.aggregate(np.stack(rows), losses)
            offset = 0
            for n in shared:
                p = self.params[n]
                grads[n] = direction[offset:offset + p.size].reshape(p.shape)
                offset += p.size
        return grads

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.train_cfg.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def train_epoch(self, x, y, groups: Sequence[str] = ALL_GROUPS) -> np.ndarray:
        if len(x) == 0:
            raise ValueError("empty training split")
        total = np.zeros(len(self.arch.tasks))
        for idx in self._batches(len(x)):
            total += self.step(x[idx], {t: v[idx] for t, v in y.items()}, groups) * len(idx)
        mean = total / len(x)
        self.weighting.end_epoch(mean)
        self.epochs_taken += 1
        return mean

    def train_steps(self, x, y, n_steps: int, groups: Sequence[str] = ALL_GROUPS) -> None:
        for _ in range(n_steps):
            if not self._queue:
                self._queue = self._batches(len(x))
            idx = self._queue.pop(0)
            self.step(x[idx], {t: v[idx] for t, v in y.items()}, groups)

    def train_for(self, x, y, amount: int, units: str = "epochs", groups: Sequence[str] = ALL_GROUPS):
        if units == "epochs":
            for _ in range(amount):
                self.train_epoch(x, y, groups)
        else:
            self.train_steps(x, y, amount, groups)

    def evaluate(self, x, y) -> tuple[dict[str, float], dict[str, float]]:
        """(metrics in physical units, per-task losses) on one split."""
        tr = self.model.run(x, y)
        metrics = {t: task_metric(t, tr[f"out:{t}"], y[t]) for t in self.arch.tasks}
        losses = {t: float(tr[f"loss:{t}"]) for t in self.arch.tasks}
        return metrics, losses


def train_local(node: NodeDataset, learner: Learner, epochs: int, groups: Sequence[str] = ALL_GROUPS,
                units: str = "epochs") -> Learner:
    x, y = split_arrays(node, "train", learner.arch.tasks)
    if len(x) == 0:
        raise ValueError(f"{node.node_id}: empty train split")
    learner.train_for(x, y, epochs, units, groups)
    return learner


def pooled_train_arrays(nodes: Sequence[NodeDataset], tasks):
    """Concatenated train splits in node-id order (ordering independent of input order)."""
    dims = {(n.splits["train"].x.shape[1], n.splits["train"].sc.shape[1], n.splits["train"].ps.shape[1],
             n.splits["train"].los.shape[1]) for n in nodes}
    if len(dims) != 1:
        raise ValueError(f"nodes disagree on feature/label dimensions: {sorted(dims)}")
    parts = [split_arrays(n, "train", tasks) for n in sorted(nodes, key=lambda n: (n.city, n.bs))]
    x = np.concatenate([p[0] for p in parts])
    y = {t: np.concatenate([p[1][t] for p in parts]) for t in tasks}
    return x, y


def train_global(nodes: Sequence[NodeDataset], learner: Learner, epochs: int) -> Learner:
    x, y = pooled_train_arrays(nodes, learner.arch.tasks)
    learner.train_for(x, y, epochs)
    return learner


# -- messages and aggregation ------------------------------------------------


@dataclass
class ServerMessage:
    round: int
    sender: str
    tensors: dict[str, np.ndarray]

    def encode(self) -> bytes:
        head = {
            "round": self.round,
            "sender": self.sender,
            "tensors": [[n, list(v.shape)] for n, v in sorted(self.tensors.items())],
        }
        hb = json.dumps(head, sort_keys=True).encode()
        body = b"".join(np.ascontiguousarray(self.tensors[n], dtype="<f8").tobytes()
                        for n, _ in head["tensors"])
        return struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def decode(cls, payload: bytes) -> "ServerMessage":
        (n,) = struct.unpack_from("<I", payload)
        head = json.loads(payload[4:4 + n])
        buf = io.BytesIO(payload[4 + n:])
        tensors = {}
        for name, shape in head["tensors"]:
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
        return cls(head["round"], head["sender"], tensors)

    @property
    def nbytes(self) -> int:
        return len(self.encode())

    def task_tagged(self) -> list[str]:
        return [n for n in self.tensors if group_of(n).startswith("task:")]


def aggregate_shared(param_sets: Sequence[dict[str, np.ndarray]], weights: Sequence[float] | None = None
                     ) -> dict[str, np.ndarray]:
    """Elementwise mean per tensor name (uniform unless ``weights`` given)."""
    if not param_sets:
        raise ValueError("nothing to aggregate")
    names = sorted(param_sets[0])
    for ps in param_sets[1:]:
        if sorted(ps) != names:
            raise ValueError("parameter names differ between nodes")
        for n in names:
            if ps[n].shape != param_sets[0][n].shape:
                raise ValueError(f"shape mismatch for {n!r}: {ps[n].shape} vs {param_sets[0][n].shape}")
    out = {}
    if weights is None:
        N = len(param_sets)
        for n in names:
            acc = param_sets[0][n].copy()
            for ps in param_sets[1:]:
                acc += ps[n]
            out[n] = acc / N
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        for n in names:
            out[n] = sum(wi * ps[n] for wi, ps in zip(w, param_sets))
    return out


class PrivacyViolation(AssertionError):
    pass


# -- topology runs ----------------------------------------------------------------


@dataclass
class TopologyRun:
    mode: str
    learners: dict[str, Learner]  # node id -> learner (global: one shared learner)
    records: list[dict] = field(default_factory=list)
    schedule: list[dict] = field(default_factory=list)
    round_bytes: list[int] = field(default_factory=list)
    messages: list[ServerMessage] = field(default_factory=list)
    log_path: Path | None = None

    @property
    def comm_bytes(self) -> int:
        return int(sum(self.round_bytes))

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _shareable(learner: Learner, share: str) -> dict[str, np.ndarray]:
    params = learner.params
    names = {"shared": params.names("shared"), "task": params.names("task"),
             "all": params.names()}[share]
    return {n: params[n] for n in names}


def run_topology(
    config: TopologyConfig,
    nodes: Sequence[NodeDataset],
    arch: ArchitectureConfig,
    train: TrainConfig,
    seed: int = 0,
    log_path=None,
    keep_messages: bool = False,
    workers: int = 1,
) -> TopologyRun:
    """Train under one topology, logging validation metrics per node and task."""
    if config.nodes is not None:
        wanted = set(config.nodes)
        nodes = [n for n in nodes if n.node_id in wanted]
    if not nodes:
        raise ValueError("no participating nodes")
    nodes = sorted(nodes, key=lambda n: (n.city, n.bs))
    tasks = arch.tasks
    data = {n.node_id: split_arrays(n, "train", tasks) for n in nodes}
    val = {n.node_id: split_arrays(n, "val", tasks) for n in nodes}
    for nid, (x, _) in data.items():
        if len(x) == 0:
            raise ValueError(f"{nid}: empty train split")
    log_path = Path(log_path) if log_path else None
    if log_path is not None and log_path.exists():
        log_path.unlink()

    if config.mode == "global":
        learner = Learner(arch, train, seed)
        learners = {n.node_id: learner for n in nodes}
    else:
        learners = {n.node_id: Learner(arch, train, seed) for n in nodes}
    run = TopologyRun(config.mode, learners, log_path=log_path)

    def log_eval(round_idx: int, epoch: int):
        seen = set()
        for n in nodes:
            lr = learners[n.node_id]
            metrics, losses = lr.evaluate(*val[n.node_id])
            for t in tasks:
                base = {"mode": config.mode, "node": n.node_id, "task": t, "round": round_idx,
                        "epoch": epoch, "comm_bytes": run.comm_bytes}
                run.append({**base, "metric": "val_metric", "value": metrics[t]})
                run.append({**base, "metric": "val_loss", "value": losses[t]})
            seen.add(id(lr))

    def each_node(fn):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(fn, nodes))
        else:
            for n in nodes:
                fn(n)

    def record_phase(round_idx, phase, amount, groups, node_ids):
        for nid in node_ids:
            run.schedule.append({"round": round_idx, "node": nid, "phase": phase,
                                 "amount": amount, "units": config.units if phase != "local" else "epochs",
                                 "groups": list(groups)})

    node_ids = [n.node_id for n in nodes]

    if config.mode in ("local", "global"):
        if config.mode == "global":
            x, y = pooled_train_arrays(nodes, tasks)
            learner = learners[node_ids[0]]
            # one-time upload of every node's training data to the central site
            run.round_bytes.append(sum(block_bytes(n.splits["train"]) for n in nodes))
            for e in range(train.epochs):
                learner.train_epoch(x, y)
                record_phase(0, "local", 1, ALL_GROUPS, ["global"])
                log_eval(0, e + 1)
        else:
            for e in range(train.epochs):
                each_node(lambda n: learners[n.node_id].train_epoch(*data[n.node_id]))
                record_phase(0, "local", 1, ALL_GROUPS, node_ids)
                log_eval(0, e + 1)
        return run

    # federated modes
    epoch = 0
    for e in range(config.tau_initial):
        each_node(lambda n: learners[n.node_id].train_epoch(*data[n.node_id]))
        epoch += 1
        record_phase(0, "initial", 1, ALL_GROUPS, node_ids)
        log_eval(0, epoch)

    sizes = [len(data[nid][0]) for nid in node_ids]
    for k in range(1, config.K + 1):
        if config.mode == "fed_alt":
            def work(n):
                lr = learners[n.node_id]
                lr.train_for(*data[n.node_id], config.tau_tsk, config.units, ("task",))
                lr.train_for(*data[n.node_id], config.tau_sh, config.units, ("shared",))
            each_node(work)
            record_phase(k, "personal", config.tau_tsk, ("task",), node_ids)
            record_phase(k, "shared", config.tau_sh, ("shared",), node_ids)
            local_epochs = config.tau_tsk + config.tau_sh
        else:
            each_node(lambda n: learners[n.node_id].train_for(*data[n.node_id], config.tau_sim, config.units))
            record_phase(k, "joint", config.tau_sim, ALL_GROUPS, node_ids)
            local_epochs = config.tau_sim
        epoch += local_epochs if config.units == "epochs" else 0

        uploads = []
        for nid in node_ids:
            msg = ServerMessage(k, nid, _shareable(learners[nid], config.share))
            if config.partial and msg.task_tagged():
                raise PrivacyViolation(f"round {k}: {nid} would upload {msg.task_tagged()}")
            uploads.append(ServerMessage.decode(msg.encode()))
            if keep_messages:
                run.messages.append(msg)
        nbytes = sum(m.nbytes for m in uploads)
        merged = aggregate_shared([m.tensors for m in uploads], sizes if config.weighted else None)
        broadcast = ServerMessage(k, "server", merged)
        if config.partial and broadcast.task_tagged():
            raise PrivacyViolation(f"round {k}: broadcast carries {broadcast.task_tagged()}")
        if keep_messages:
            run.messages.append(broadcast)
        payload = broadcast.encode()
        for nid in node_ids:
            received = ServerMessage.decode(payload)
            for name, value in received.tensors.items():
                learners[nid].params.tensors[name][...] = value
            nbytes += len(payload)
        run.round_bytes.append(nbytes)
        log_eval(k, epoch)
    return run
