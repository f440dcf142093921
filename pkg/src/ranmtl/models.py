"""MTL architectures (STL, HPS, MMoE, DSelect-k, CGC) over the autodiff graph.

Parameter names carry their group as the prefix before the first ``/``:
``shared/...`` for task-sharing parameters and ``task:<T>/...`` for the
parameters owned by task ``T``.  Experts are stored stacked, one tensor of
shape ``(fan_in, n_experts, fan_out)`` per group.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .autodiff import Graph, Trace, glorot_uniform, smoothstep_value
from .tasks import TASK_ORDER, TASKS, normalize_tasks

ARCHITECTURES = ("STL", "HPS", "MMoE", "DSelectK", "CGC")
MTL_ARCHITECTURES = ("HPS", "MMoE", "DSelectK", "CGC")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureConfig:
    kind: str = "HPS"
    tasks: tuple[str, ...] = TASK_ORDER
    input_dim: int = 9
    shared_width: int = 512
    num_experts: int = 2
    cgc_task_experts: int = 2
    dselect_k: int = 1
    dselect_gamma: float = 1.0
    dselect_reg: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "tasks", normalize_tasks(self.tasks))
        if self.kind not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.shared_width <= 0 or self.input_dim <= 0:
            raise ValueError("layer widths must be positive")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.kind == "STL" and len(self.tasks) != 1:
            raise ValueError("STL models exactly one task")
        if self.kind == "CGC" and self.cgc_task_experts < 1:
            raise ValueError("CGC needs at least one task-specific expert per task")
        if self.kind == "DSelectK" and not 1 <= self.dselect_k <= self.num_experts:
            raise ValueError(f"dselect_k={self.dselect_k} must be in [1, num_experts={self.num_experts}]")

    @property
    def code_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.num_experts)))

    def with_tasks(self, tasks) -> "ArchitectureConfig":
        return replace(self, tasks=tuple(tasks))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if k == "tasks" else v for k, v in d.items()})


def group_of(name: str) -> str:
    return name.split("/", 1)[0]


class ParameterSet:
    """Named parameter tensors partitioned into shared and per-task groups."""

    def __init__(self, tensors: dict[str, np.ndarray], kind: str):
        self.tensors = tensors
        self.kind = kind
        for name in tensors:
            g = group_of(name)
            if g != "shared" and not g.startswith("task:"):
                raise ValueError(f"parameter {name!r} has no group tag")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, group: str | None = None) -> list[str]:
        """Sorted names; ``group`` is ``"shared"``, ``"task"`` (all task
        groups) or an exact tag like ``"task:SC"``."""
        out = []
        for n in self.tensors:
            g = group_of(n)
            if group is None or g == group or (group == "task" and g.startswith("task:")):
                out.append(n)
        return sorted(out)

    @property
    def shared(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in self.names("shared")}

    @property
    def per_task(self) -> dict[str, dict[str, np.ndarray]]:
        out: dict[str, dict[str, np.ndarray]] = {}
        for n in self.names("task"):
            out.setdefault(group_of(n)[5:], {})[n] = self.tensors[n]
        return out

    def size(self, group: str | None = None) -> int:
        return int(sum(self.tensors[n].size for n in self.names(group)))

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.tensors.items()}, self.kind)

    def flat(self, names) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in names])


# -- parameter construction ---------------------------------------------------


def parameter_shapes(arch: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    d, h, E = arch.input_dim, arch.shared_width, arch.num_experts
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.kind in ("STL", "HPS"):
        shapes["shared/trunk/W"] = (d, h)
        shapes["shared/trunk/b"] = (h,)
    else:
        shapes["shared/experts/W"] = (d, E, h)
        shapes["shared/experts/b"] = (E, h)
    for t in arch.tasks:
        p = f"task:{t}"
        if arch.kind == "MMoE":
            shapes[f"{p}/gate/W"] = (d, E)
            shapes[f"{p}/gate/b"] = (E,)
        elif arch.kind == "CGC":
            Et = arch.cgc_task_experts
            shapes[f"{p}/experts/W"] = (d, Et, h)
            shapes[f"{p}/experts/b"] = (Et, h)
            shapes[f"{p}/gate/W"] = (d, E + Et)
            shapes[f"{p}/gate/b"] = (E + Et,)
        elif arch.kind == "DSelectK":
            shapes[f"{p}/dselect/z"] = (arch.dselect_k, arch.code_bits)
            shapes[f"{p}/dselect/w"] = (arch.dselect_k,)
        shapes[f"{p}/head/W"] = (h, TASKS[t].dim)
        shapes[f"{p}/head/b"] = (TASKS[t].dim,)
    return shapes


def init_params(arch: ArchitectureConfig, seed: int | np.random.Generator = 0) -> ParameterSet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(arch).items():
        leaf = name.rsplit("/", 1)[1]
        if name.endswith("/dselect/z"):
            g = arch.dselect_gamma
            tensors[name] = rng.uniform(-g / 4, g / 4, size=shape)
        elif name.endswith("/dselect/w"):
            tensors[name] = rng.normal(0.0, 0.05, size=shape)
        elif leaf == "W":
            fan_in, fan_out = shape[0], shape[-1]
            tensors[name] = glorot_uniform(rng, fan_in, fan_out, shape)
        else:
            tensors[name] = np.zeros(shape)
    return ParameterSet(tensors, arch.kind)


# -- graph construction -------------------------------------------------------


def _dselect_gate(g: Graph, arch: ArchitectureConfig, z, w):
    """Static DSelect-k gate over ``num_experts``; returns (gate, entropy)."""
    E, bits = arch.num_experts, arch.code_bits
    s = g.smoothstep(z, arch.dselect_gamma)  # (k, bits)
    on = [g.take(s, l) for l in range(bits)]
    off = [g.lin(b, a=-1.0, c=1.0) for b in on]
    codes = []
    for j in range(2**bits):
        r = None
        for l in range(bits):
            f = on[l] if (j >> l) & 1 else off[l]
            r = f if r is None else g.mul(r, f)
        codes.append(r)
    # codes past the last expert fold back onto existing ones (code mod E),
    # so every selector stays a distribution without renormalizing
    rows = []
    for e in range(E):
        r = codes[e]
        for c in range(e + E, 2**bits, E):
            r = g.add(r, codes[c])
        rows.append(r)
    R = g.stack(*rows, axis=0)  # (E, k) selector distributions over experts
    alpha = g.softmax(w)  # (k,)
    gate = g.sum_axis(g.mul(R, alpha), -1)
    gate = g.div(gate, g.sum(gate))
    ent = g.scale(g.sum(g.mul(R, g.log(g.lin(R, c=1e-10)))), -1.0)
    return gate, ent


def build_graph(arch: ArchitectureConfig) -> Graph:
    """Graph with input ``x``, targets ``y:<T>`` and outputs ``out:<T>``,
    ``loss:<T>``, plus ``gate:<T>`` / ``reg:<T>`` where the architecture has them."""
    g = Graph()
    shapes = parameter_shapes(arch)
    P = {n: g.param(n, s) for n, s in shapes.items()}
    x = g.input("x", (None, arch.input_dim))
    if arch.kind in ("STL", "HPS"):
        trunk = g.relu(g.affine(x, P["shared/trunk/W"], P["shared/trunk/b"]))
    else:
        shared_exp = g.relu(g.experts(x, P["shared/experts/W"], P["shared/experts/b"]))
    for t in arch.tasks:
        p = f"task:{t}"
        if arch.kind in ("STL", "HPS"):
            feat = trunk
        elif arch.kind == "MMoE":
            gate = g.softmax(g.affine(x, P[f"{p}/gate/W"], P[f"{p}/gate/b"]))
            g.output(f"gate:{t}", gate)
            feat = g.mix(gate, shared_exp)
        elif arch.kind == "CGC":
            own = g.relu(g.experts(x, P[f"{p}/experts/W"], P[f"{p}/experts/b"]))
            gate = g.softmax(g.affine(x, P[f"{p}/gate/W"], P[f"{p}/gate/b"]))
            g.output(f"gate:{t}", gate)
            feat = g.mix(gate, shared_exp, own)
        else:
            gate, ent = _dselect_gate(g, arch, P[f"{p}/dselect/z"], P[f"{p}/dselect/w"])
            g.output(f"gate:{t}", gate)
            g.output(f"reg:{t}", g.scale(ent, arch.dselect_reg))
            feat = g.mix(gate, shared_exp)
        out = g.affine(feat, P[f"{p}/head/W"], P[f"{p}/head/b"])
        spec = TASKS[t]
        y = g.input(f"y:{t}", (None, spec.dim))
        if spec.is_classification:
            out = g.sigmoid(out)
            loss = g.bce(out, y)
        else:
            loss = g.mse(out, y)
        g.output(f"out:{t}", out)
        g.output(f"loss:{t}", loss)
    return g


@lru_cache(maxsize=64)
def cached_graph(arch: ArchitectureConfig) -> Graph:
    return build_graph(arch)


class MTLModel:
    """Parameters plus the (shared, cached) graph of one architecture."""

    def __init__(self, arch: ArchitectureConfig, params: ParameterSet | None = None, seed=0):
        self.arch = arch
        self.params = params if params is not None else init_params(arch, seed)
        self.graph = cached_graph(arch)
        self._zero_targets: dict[int, dict] = {}

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.arch.tasks

    def leaves(self, x: np.ndarray, targets: dict[str, np.ndarray] | None = None) -> dict:
        feed = dict(self.params.tensors)
        feed["x"] = x
        for t in self.tasks:
            if targets is not None and t in targets:
                feed[f"y:{t}"] = targets[t]
            else:
                feed[f"y:{t}"] = np.zeros((len(x), TASKS[t].dim))
        return feed

    def run(self, x, targets=None, check: bool = True) -> Trace:
        return self.graph.forward(self.leaves(x, targets), check=check)

    def predict(self, x) -> dict[str, np.ndarray]:
        tr = self.run(x)
        return {t: tr[f"out:{t}"] for t in self.tasks}

    def copy(self) -> "MTLModel":
        return MTLModel(self.arch, self.params.copy())


def forward(params: ParameterSet, x, arch: ArchitectureConfig) -> dict[str, np.ndarray]:
    if params.kind != arch.kind:
        raise ValueError(f"parameters built for {params.kind}, not {arch.kind}")
    return MTLModel(arch, params).predict(np.atleast_2d(x))


def forward_stl(params: ParameterSet, x, task: str, arch: ArchitectureConfig | None = None):
    arch = arch or ArchitectureConfig("STL", (task,))
    if arch.kind != "STL" or arch.tasks != (task,):
        raise ValueError(f"STL parameters are for {arch.tasks}, not {task!r}")
    if f"task:{task}/head/W" not in params.tensors:
        raise ValueError(f"parameters have no head for task {task!r}")
    return forward(params, x, arch)[task]


def forward_hps(params, x, arch):
    return forward(params, x, arch)


forward_mmoe = forward_dselectk = forward_cgc = forward_hps


def binarize_dselect_codes(params: ParameterSet, arch: ArchitectureConfig) -> ParameterSet:
    """Push codes past the smooth-step saturation points (hard thresholding)."""
    out = params.copy()
    for n in out.names("task"):
        if n.endswith("/dselect/z"):
            z = out.tensors[n]
            out.tensors[n] = np.where(z >= 0, arch.dselect_gamma, -arch.dselect_gamma)
    return out


def dselect_gate_value(params: ParameterSet, arch: ArchitectureConfig, task: str) -> np.ndarray:
    """Numpy evaluation of a DSelect-k gate (used to cross-check the graph)."""
    z = params[f"task:{task}/dselect/z"]
    w = params[f"task:{task}/dselect/w"]
    s = smoothstep_value(z, arch.dselect_gamma)
    codes = np.ones((2**arch.code_bits, len(w)))
    for j in range(len(codes)):
        for l in range(arch.code_bits):
            codes[j] *= s[:, l] if (j >> l) & 1 else 1 - s[:, l]
    R = np.zeros((arch.num_experts, len(w)))
    for j in range(len(codes)):
        R[j % arch.num_experts] += codes[j]
    a = np.exp(w - w.max())
    a /= a.sum()
    gate = R @ a
    return gate / gate.sum()


# -- counting -----------------------------------------------------------------


def count_params(arch: ArchitectureConfig) -> dict:
    """Analytic trainable-parameter count with a per-group breakdown."""
    d, h, E = arch.input_dim, arch.shared_width, arch.num_experts
    layer = d * h + h
    heads = {t: h * TASKS[t].dim + TASKS[t].dim for t in arch.tasks}
    if arch.kind in ("STL", "HPS"):
        shared = layer
        extra = {t: 0 for t in arch.tasks}
    else:
        shared = E * layer
        if arch.kind == "MMoE":
            extra = {t: d * E + E for t in arch.tasks}
        elif arch.kind == "CGC":
            Et = arch.cgc_task_experts
            extra = {t: Et * layer + d * (E + Et) + (E + Et) for t in arch.tasks}
        else:
            extra = {t: arch.dselect_k * arch.code_bits + arch.dselect_k for t in arch.tasks}
    per_task = {t: heads[t] + extra[t] for t in arch.tasks}
    return {"total": shared + sum(per_task.values()), "shared": shared, "per_task": per_task}


def enumerate_params(arch: ArchitectureConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(arch).values()))


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: MTLModel, path, extra: dict | None = None) -> Path:
    from .scenario import _npy_bytes, write_zip

    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.arch.to_dict(),
        "groups": {n: group_of(n) for n in model.params.names()},
        "extra": extra or {},
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()}
    for n, v in model.params.tensors.items():
        entries[f"tensors/{n}.npy"] = _npy_bytes(v)
    write_zip(path, entries)
    return path


def load_checkpoint(path) -> tuple[MTLModel, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        arch = ArchitectureConfig.from_dict(meta["architecture"])
        tensors = {
            n: np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{n}.npy"))) for n in meta["groups"]
        }
    expected = parameter_shapes(arch)
    if set(tensors) != set(expected):
        raise ValueError(f"{path}: tensors do not match architecture {arch.kind}")
    return MTLModel(arch, ParameterSet(tensors, arch.kind)), meta.get("extra", {})
