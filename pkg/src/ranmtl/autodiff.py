"""Static-graph reverse-mode differentiation on dense float64 arrays.

A :class:`Graph` is declared once (leaves, primitive nodes, named outputs) and
then evaluated many times with :meth:`Graph.forward`, which returns a
:class:`Trace`.  ``Trace.backward`` walks the recorded values in reverse
topological order.  Everything is deterministic: accumulation order is the
node order, so two identical runs produce bitwise-identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

BCE_EPS = 1e-12


class GraphError(ValueError):
    """Raised for malformed graphs or invalid evaluation inputs."""


class ShapeError(GraphError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NonFiniteError(GraphError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- primitive definitions -------------------------------------------------
# forward(values, attrs) -> out ; backward(g, values, out, attrs, needs) -> grads


def _affine_fwd(v, a):
    x, w, b = v
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(f"affine: x{x.shape} incompatible with W{w.shape}")
    if b.shape[-1] != w.shape[-1] or b.shape[:-1] != w.shape[:-2]:
        raise ValueError(f"affine: b{b.shape} incompatible with W{w.shape}")
    out = np.matmul(x, w)
    out += b[..., None, :] if w.ndim == 3 else b
    return out


def _affine_bwd(g, v, out, a, needs):
    x, w, b = v
    gx = gw = gb = None
    if needs[0]:
        gx = _unbroadcast(np.matmul(g, np.swapaxes(w, -1, -2)), x.shape)
    if needs[1]:
        gw = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), w.shape)
    if needs[2]:
        gb = _unbroadcast(g.sum(axis=-2), b.shape)
    return gx, gw, gb


def _relu_bwd(g, v, out, a, needs):
    return (g * (v[0] > 0),)


def _sigmoid_fwd(v, a):
    return 1.0 / (1.0 + np.exp(-v[0]))


def _sigmoid_bwd(g, v, out, a, needs):
    return (g * out * (1.0 - out),)


def _softmax_fwd(v, a):
    z = v[0] - v[0].max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, v, out, a, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _broadcast_check(v, name):
    try:
        np.broadcast_shapes(v[0].shape, v[1].shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {v[0].shape} and {v[1].shape} do not broadcast") from None


def _add_fwd(v, a):
    _broadcast_check(v, "add")
    return v[0] + v[1]


def _add_bwd(g, v, out, a, needs):
    return (
        _unbroadcast(g, v[0].shape) if needs[0] else None,
        _unbroadcast(g, v[1].shape) if needs[1] else None,
    )


def _sub_fwd(v, a):
    _broadcast_check(v, "sub")
    return v[0] - v[1]


def _sub_bwd(g, v, out, a, needs):
    return (
        _unbroadcast(g, v[0].shape) if needs[0] else None,
        _unbroadcast(-g, v[1].shape) if needs[1] else None,
    )


def _mul_fwd(v, a):
    _broadcast_check(v, "mul")
    return v[0] * v[1]


def _mul_bwd(g, v, out, a, needs):
    return (
        _unbroadcast(g * v[1], v[0].shape) if needs[0] else None,
        _unbroadcast(g * v[0], v[1].shape) if needs[1] else None,
    )


def _scale_bwd(g, v, out, a, needs):
    return (g * a["c"],)


def _exp_bwd(g, v, out, a, needs):
    return (g * out,)


def _log_fwd(v, a):
    if np.any(v[0] <= 0):
        raise ValueError("log: non-positive argument")
    return np.log(v[0])


def _log_bwd(g, v, out, a, needs):
    return (g / v[0],)


def _clamp_min_bwd(g, v, out, a, needs):
    return (g * (v[0] > a["lo"]),)


def _sum_bwd(g, v, out, a, needs):
    return (np.broadcast_to(g, v[0].shape).copy(),)


def _mean_bwd(g, v, out, a, needs):
    return (np.full(v[0].shape, g / v[0].size),)


def _sum_axis_fwd(v, a):
    return v[0].sum(axis=a["axis"])


def _sum_axis_bwd(g, v, out, a, needs):
    g = np.expand_dims(g, a["axis"])
    return (np.broadcast_to(g, v[0].shape).copy(),)


def _same_shape(v, name):
    if v[0].shape != v[1].shape:
        raise ValueError(f"{name}: prediction {v[0].shape} vs target {v[1].shape}")


def _mse_fwd(v, a):
    _same_shape(v, "mse")
    d = v[0] - v[1]
    return np.asarray(np.mean(d * d))


def _mse_bwd(g, v, out, a, needs):
    return (g * 2.0 * (v[0] - v[1]) / v[0].size, None)


def _bce_fwd(v, a):
    _same_shape(v, "bce")
    p = np.clip(v[0], BCE_EPS, 1.0 - BCE_EPS)
    y = v[1]
    return np.asarray(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _bce_bwd(g, v, out, a, needs):
    p = np.clip(v[0], BCE_EPS, 1.0 - BCE_EPS)
    y = v[1]
    inside = (v[0] > BCE_EPS) & (v[0] < 1.0 - BCE_EPS)
    gp = (p - y) / (p * (1.0 - p)) / p.size
    return (g * gp * inside, None)


def smoothstep_value(x: np.ndarray, gamma: float) -> np.ndarray:
    """Cubic smooth step: 0 below -gamma/2, 1 above gamma/2."""
    x = np.asarray(x, dtype=np.float64)
    inner = 0.5 + 1.5 * x / gamma - 2.0 * x**3 / gamma**3
    return np.where(x <= -gamma / 2, 0.0, np.where(x >= gamma / 2, 1.0, inner))


def _smoothstep_fwd(v, a):
    return smoothstep_value(v[0], a["gamma"])


def _smoothstep_bwd(g, v, out, a, needs):
    x, gamma = v[0], a["gamma"]
    d = 1.5 / gamma - 6.0 * x**2 / gamma**3
    d = np.where(np.abs(x) >= gamma / 2, 0.0, d)
    return (g * d,)


def _take_fwd(v, a):
    return v[0][..., a["index"]]


def _take_bwd(g, v, out, a, needs):
    gx = np.zeros(v[0].shape)
    gx[..., a["index"]] = g
    return (gx,)


def _stack_fwd(v, a):
    shapes = {x.shape for x in v}
    if len(shapes) != 1:
        raise ValueError(f"stack: mismatched shapes {sorted(shapes)}")
    return np.stack(v, axis=a["axis"])


def _stack_bwd(g, v, out, a, needs):
    parts = np.moveaxis(g, a["axis"], 0)
    return tuple(parts[i] if needs[i] else None for i in range(len(v)))


def _div_fwd(v, a):
    _broadcast_check(v, "div")
    return v[0] / v[1]


def _div_bwd(g, v, out, a, needs):
    return (
        _unbroadcast(g / v[1], v[0].shape) if needs[0] else None,
        _unbroadcast(-g * out / v[1], v[1].shape) if needs[1] else None,
    )


def _experts_fwd(v, a):
    x, w, b = v
    if w.ndim != 3 or x.shape[-1] != w.shape[0] or b.shape != w.shape[1:]:
        raise ValueError(f"experts: x{x.shape}, W{w.shape}, b{b.shape} incompatible")
    d, e, h = w.shape
    out = x @ w.reshape(d, e * h)
    out += b.reshape(-1)
    return out.reshape(len(x), e, h)


def _experts_bwd(g, v, out, a, needs):
    x, w, b = v
    d, e, h = w.shape
    g2 = g.reshape(len(x), e * h)
    gx = g2 @ w.reshape(d, e * h).T if needs[0] else None
    gw = (x.T @ g2).reshape(w.shape) if needs[1] else None
    gb = g2.sum(axis=0).reshape(b.shape) if needs[2] else None
    return gx, gw, gb


def _mix_fwd(v, a):
    gate, blocks = v[0], v[1:]
    total = sum(blk.shape[1] for blk in blocks)
    if gate.shape[-1] != total:
        raise ValueError(f"mix: gate width {gate.shape[-1]} != {total} experts")
    out = None
    start = 0
    for blk in blocks:
        n = blk.shape[1]
        if gate.ndim == 2:
            if len(gate) != len(blk):
                raise ValueError(f"mix: gate batch {len(gate)} != expert batch {len(blk)}")
            term = np.matmul(gate[:, None, start:start + n], blk)[:, 0, :]
        else:
            term = np.tensordot(gate[start:start + n], blk, axes=([0], [1]))
        out = term if out is None else out + term
        start += n
    return out


def _mix_bwd(g, v, out, a, needs):
    gate, blocks = v[0], v[1:]
    grads = [None] * len(v)
    if needs[0]:
        if gate.ndim == 2:
            parts = [np.matmul(blk, g[:, :, None])[:, :, 0] for blk in blocks]
        else:
            parts = [np.einsum("beh,bh->e", blk, g) for blk in blocks]
        grads[0] = np.concatenate(parts, axis=-1)
    start = 0
    for i, blk in enumerate(blocks, start=1):
        n = blk.shape[1]
        if needs[i]:
            w = gate[..., start:start + n]
            grads[i] = w[:, :, None] * g[:, None, :] if gate.ndim == 2 else w[None, :, None] * g[:, None, :]
        start += n
    return tuple(grads)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("affine", _affine_fwd, _affine_bwd),
        Primitive("experts", _experts_fwd, _experts_bwd),
        Primitive("relu", lambda v, a: np.maximum(v[0], 0.0), _relu_bwd),
        Primitive("sigmoid", _sigmoid_fwd, _sigmoid_bwd),
        Primitive("softmax", _softmax_fwd, _softmax_bwd),
        Primitive("add", _add_fwd, _add_bwd),
        Primitive("sub", _sub_fwd, _sub_bwd),
        Primitive("mul", _mul_fwd, _mul_bwd),
        Primitive("div", _div_fwd, _div_bwd),
        Primitive("scale", lambda v, a: v[0] * a["c"], _scale_bwd),
        Primitive("lin", lambda v, a: v[0] * a["a"] + a["c"], lambda g, v, o, a, n: (g * a["a"],)),
        Primitive("exp", lambda v, a: np.exp(v[0]), _exp_bwd),
        Primitive("log", _log_fwd, _log_bwd),
        Primitive("clamp_min", lambda v, a: np.maximum(v[0], a["lo"]), _clamp_min_bwd),
        Primitive("sum", lambda v, a: np.asarray(v[0].sum()), _sum_bwd),
        Primitive("mean", lambda v, a: np.asarray(v[0].mean()), _mean_bwd),
        Primitive("sum_axis", _sum_axis_fwd, _sum_axis_bwd),
        Primitive("mse", _mse_fwd, _mse_bwd),
        Primitive("bce", _bce_fwd, _bce_bwd),
        Primitive("smoothstep", _smoothstep_fwd, _smoothstep_bwd),
        Primitive("take", _take_fwd, _take_bwd),
        Primitive("stack", _stack_fwd, _stack_bwd),
        Primitive("mix", _mix_fwd, _mix_bwd),
    ]
}


@dataclass
class Node:
    id: int
    op: str  # primitive name, or "leaf"
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


@dataclass
class LeafSpec:
    node: int
    shape: tuple  # None entries match any size
    trainable: bool


class Graph:
    """Declarative computation graph.

    Builder methods return integer node ids; nodes can only reference ids that
    already exist, so the node list is topologically ordered by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, LeafSpec] = {}
        self.outputs: dict[str, int] = {}
        self._ancestors: dict[int, np.ndarray] = {}

    # -- construction ------------------------------------------------------
    def _leaf(self, name: str, shape, trainable: bool) -> int:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf {name!r}")
        node = Node(len(self.nodes), "leaf", attrs={"name": name}, requires_grad=trainable)
        self.nodes.append(node)
        self.leaves[name] = LeafSpec(node.id, tuple(shape), trainable)
        return node.id

    def param(self, name: str, shape) -> int:
        """Trainable leaf; gradients are returned for it."""
        return self._leaf(name, shape, True)

    def input(self, name: str, shape) -> int:
        """Non-trainable leaf (data, targets, per-step constants)."""
        return self._leaf(name, shape, False)

    def op(self, name: str, *inputs: int, **attrs) -> int:
        if name not in PRIMITIVES:
            raise GraphError(f"unknown primitive {name!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{name}: input {i} does not precede node {len(self.nodes)}")
        node = Node(
            len(self.nodes),
            name,
            tuple(inputs),
            attrs,
            any(self.nodes[i].requires_grad for i in inputs),
        )
        self.nodes.append(node)
        self._ancestors.clear()
        return node.id

    def output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    # shorthands used throughout the models
    def affine(self, x, w, b):
        return self.op("affine", x, w, b)

    def experts(self, x, w, b):
        """Stacked affine layers: ``W (d, E, H)``, ``b (E, H)`` -> ``(B, E, H)``."""
        return self.op("experts", x, w, b)

    def relu(self, x):
        return self.op("relu", x)

    def sigmoid(self, x):
        return self.op("sigmoid", x)

    def softmax(self, x):
        return self.op("softmax", x)

    def add(self, a, b):
        return self.op("add", a, b)

    def sub(self, a, b):
        return self.op("sub", a, b)

    def mul(self, a, b):
        return self.op("mul", a, b)

    def scale(self, x, c: float):
        return self.op("scale", x, c=float(c))

    def div(self, a, b):
        return self.op("div", a, b)

    def lin(self, x, a: float = 1.0, c: float = 0.0):
        """Affine map ``a * x + c`` with scalar constants."""
        return self.op("lin", x, a=float(a), c=float(c))

    def exp(self, x):
        return self.op("exp", x)

    def log(self, x):
        return self.op("log", x)

    def clamp_min(self, x, lo: float):
        return self.op("clamp_min", x, lo=float(lo))

    def sum(self, x):
        return self.op("sum", x)

    def mean(self, x):
        return self.op("mean", x)

    def sum_axis(self, x, axis: int):
        return self.op("sum_axis", x, axis=axis)

    def mse(self, pred, target):
        return self.op("mse", pred, target)

    def bce(self, prob, target):
        return self.op("bce", prob, target)

    def smoothstep(self, x, gamma: float):
        return self.op("smoothstep", x, gamma=float(gamma))

    def take(self, x, index: int):
        return self.op("take", x, index=int(index))

    def stack(self, *xs, axis: int = -1):
        return self.op("stack", *xs, axis=axis)

    def mix(self, gate, *expert_blocks):
        """Gate-weighted sum of expert outputs ``(B, E_i, H)``; the gate is
        ``(B, sum E_i)`` per example or ``(sum E_i,)`` static."""
        return self.op("mix", gate, *expert_blocks)

    # -- evaluation --------------------------------------------------------
    def _check_leaf(self, name: str, value) -> np.ndarray:
        spec = self.leaves[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != len(spec.shape) or any(
            s is not None and s != d for s, d in zip(spec.shape, arr.shape)
        ):
            raise ShapeError(spec.node, f"leaf {name!r} expects shape {spec.shape}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"leaf {name!r} contains NaN or Inf")
        return arr

    def forward(self, leaves: Mapping[str, np.ndarray], check: bool = True) -> Trace:
        missing = set(self.leaves) - set(leaves)
        if missing:
            raise GraphError(f"missing leaves: {sorted(missing)}")
        values: list = [None] * len(self.nodes)
        for name, spec in self.leaves.items():
            values[spec.node] = self._check_leaf(name, leaves[name]) if check else leaves[name]
        for node in self.nodes:
            if node.op == "leaf":
                continue
            args = [values[i] for i in node.inputs]
            try:
                values[node.id] = PRIMITIVES[node.op].forward(args, node.attrs)
            except ValueError as exc:
                raise ShapeError(node.id, str(exc)) from None
        trace = Trace(self, values)
        if check:
            for name, nid in self.outputs.items():
                if not np.isfinite(values[nid]).all():
                    raise NonFiniteError(f"output {name!r} is not finite")
        return trace

    def ancestors(self, node: int) -> np.ndarray:
        """Boolean mask of nodes that ``node`` depends on (inclusive)."""
        mask = self._ancestors.get(node)
        if mask is None:
            mask = np.zeros(len(self.nodes), dtype=bool)
            mask[node] = True
            for n in reversed(self.nodes[: node + 1]):
                if mask[n.id]:
                    mask[list(n.inputs)] = True
            self._ancestors[node] = mask
        return mask


class Trace:
    """Values of one forward evaluation; supports repeated backward passes."""

    def __init__(self, graph: Graph, values: list):
        self.graph = graph
        self.values = values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.graph.outputs[name]]

    @property
    def outputs(self) -> dict[str, np.ndarray]:
        return {k: self.values[v] for k, v in self.graph.outputs.items()}

    def backward(
        self,
        seeds: str | Mapping[str, float],
        wrt: Sequence[str] | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of ``sum_k seeds[k] * output_k`` with respect to parameters.

        ``seeds`` may be a single scalar output name (seed 1).  Every trainable
        leaf (or just ``wrt``) gets an entry; unreachable leaves get zeros.
        """
        g = self.graph
        if isinstance(seeds, str):
            seeds = {seeds: 1.0}
        grads: list = [None] * len(g.nodes)
        reach = np.zeros(len(g.nodes), dtype=bool)
        for name, coef in seeds.items():
            nid = g.outputs[name]
            if self.values[nid].ndim != 0:
                raise GraphError(f"backward needs a scalar output, {name!r} has shape {self.values[nid].shape}")
            reach |= g.ancestors(nid)
            seed = np.asarray(float(coef))
            grads[nid] = seed if grads[nid] is None else grads[nid] + seed
        for node in reversed(g.nodes):
            gout = grads[node.id]
            if gout is None or node.op == "leaf" or not reach[node.id]:
                continue
            needs = [g.nodes[i].requires_grad for i in node.inputs]
            args = [self.values[i] for i in node.inputs]
            in_grads = PRIMITIVES[node.op].backward(gout, args, self.values[node.id], node.attrs, needs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not g.nodes[i].requires_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        names = wrt if wrt is not None else [n for n, s in g.leaves.items() if s.trainable]
        out = {}
        for name in names:
            spec = g.leaves[name]
            gv = grads[spec.node]
            out[name] = np.zeros_like(self.values[spec.node]) if gv is None else np.asarray(gv)
        return out


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """In-place bias-corrected Adam update of ``params[names]``.

    Step counts are kept per tensor, so a tensor frozen for a while resumes
    with its own bias correction.
    """
    names = list(grads) if names is None else list(names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    b1, b2 = state.beta1, state.beta2
    for name in names:
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        t = state.steps[name] = state.steps[name] + 1
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1**t)
        denom = np.sqrt(v / (1.0 - b2**t))
        denom += state.eps
        p -= state.lr * mhat / denom
    return params


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
