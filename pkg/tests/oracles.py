"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from ranmtl.autodiff import smoothstep_value


# -- finite differences ------------------------------------------------------------


def kink_pattern(graph, trace) -> tuple:
    """Which side of every non-smooth point each relu/clamp/smoothstep input sits on."""
    pattern = []
    for node in graph.nodes:
        if node.op == "relu":
            pattern.append((trace.values[node.inputs[0]] > 0).tobytes())
        elif node.op == "clamp_min":
            pattern.append((trace.values[node.inputs[0]] > node.attrs["lo"]).tobytes())
        elif node.op == "smoothstep":
            v = trace.values[node.inputs[0]] / node.attrs["gamma"]
            pattern.append(np.digitize(v, [-0.5, 0.5]).tobytes())
    return tuple(pattern)


def scalar_objective(graph, leaves, seeds) -> float:
    tr = graph.forward(leaves)
    return float(sum(c * tr[k] for k, c in seeds.items()))


def rel_error(a: float, f: float, floor: float = 1e-6) -> float:
    return abs(a - f) / max(abs(a), abs(f), floor)


def fd_check(graph, leaves, seeds, rng, probes: int = 20, h: float = 1e-4, floor: float = 1e-6,
             max_tries: int | None = None):
    """Max relative error of autodiff vs central differences over random probes.

    Probes whose +/- h perturbation crosses a kink are redrawn: the
    difference quotient is not an estimate of the derivative there.
    """
    tr = graph.forward(leaves)
    grads = tr.backward(seeds)
    base_kinks = kink_pattern(graph, tr)
    names = [n for n in grads if np.asarray(leaves[n]).size]
    worst, done, tries = 0.0, 0, 0
    while done < probes:
        tries += 1
        if tries > (max_tries or 20 * probes):
            raise RuntimeError("could not find kink-free probes")
        name = names[rng.integers(len(names))]
        arr = leaves[name]
        idx = tuple(rng.integers(s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        tp = graph.forward(leaves)
        fp = float(sum(c * tp[k] for k, c in seeds.items()))
        kp = kink_pattern(graph, tp)
        arr[idx] = orig - h
        tm = graph.forward(leaves)
        fm = float(sum(c * tm[k] for k, c in seeds.items()))
        km = kink_pattern(graph, tm)
        arr[idx] = orig
        if kp != base_kinks or km != base_kinks:
            continue
        worst = max(worst, rel_error(float(grads[name][idx]), (fp - fm) / (2 * h), floor))
        done += 1
    return worst


# -- line of sight ----------------------------------------------------------------------


def los_by_sampling(bs_xy, bs_h, ue_xy, ue_h, boxes, step: float = 0.1) -> bool:
    """Walk the 3D segment in ``step`` increments and test strict box interiors."""
    bs = np.array([bs_xy[0], bs_xy[1], bs_h])
    ue = np.array([ue_xy[0], ue_xy[1], ue_h])
    length = np.linalg.norm(ue - bs)
    n = max(int(np.ceil(length / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = bs + t * (ue - bs)
    for x0, y0, x1, y1, h in boxes:
        inside = (pts[:, 0] > x0) & (pts[:, 0] < x1) & (pts[:, 1] > y0) & (pts[:, 1] < y1) & (pts[:, 2] < h)
        if inside.any():
            return False
    return True


# -- simplex grids ---------------------------------------------------------------------


def simplex_grid(T: int, step: float = 0.01) -> np.ndarray:
    n = int(round(1 / step))
    pts = [c for c in itertools.product(range(n + 1), repeat=T - 1) if sum(c) <= n]
    grid = np.array([list(c) + [n - sum(c)] for c in pts], dtype=np.float64)
    return grid / n


def min_norm_two(g1: np.ndarray, g2: np.ndarray) -> float:
    """Closed-form 2-task min-norm weight on ``g1``."""
    diff = g1 - g2
    denom = diff @ diff
    if denom == 0:
        return 0.5
    return float(np.clip(((g2 - g1) @ g2) / denom, 0.0, 1.0))


# -- misc ------------------------------------------------------------------------------


def smoothstep_reference(v: float, gamma: float) -> float:
    if v <= -gamma / 2:
        return 0.0
    if v >= gamma / 2:
        return 1.0
    return 0.5 + 1.5 * v / gamma - 2 * v**3 / gamma**3


def softmax(z):
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


__all__ = [name for name in dir() if not name.startswith("_")] + ["smoothstep_value"]


# -- random graphs ------------------------------------------------------------------------


def random_primitive_graph(rng):
    """A random composition covering every primitive; returns (graph, leaves, seeds)."""
    from ranmtl.autodiff import Graph

    g = Graph()
    B, d, h, k = (int(rng.integers(lo, hi)) for lo, hi in ((1, 5), (2, 6), (2, 7), (1, 4)))
    leaves = {}

    def par(name, shape, scale=0.7):
        leaves[name] = rng.normal(0.0, scale, size=shape)
        return g.param(name, shape)

    def inp(name, value):
        leaves[name] = value
        return g.input(name, value.shape)

    x = par("x", (B, d), 1.0)
    z = g.affine(x, par("W", (d, h)), par("b", (h,)))
    acts = [g.relu, g.sigmoid, g.softmax, lambda v: g.exp(g.scale(v, 0.3)),
            lambda v: g.smoothstep(v, 8.0), lambda v: g.clamp_min(v, -0.2), lambda v: g.lin(v, 0.5, 0.1)]
    hid = acts[rng.integers(len(acts))](z)
    ex = g.relu(g.experts(x, par("We", (d, 2, h)), par("be", (2, h))))
    if rng.random() < 0.5:
        gate = g.softmax(g.affine(x, par("Wg", (d, 2)), par("bg", (2,))))
    else:
        gate = g.softmax(par("gs", (2,)))
    mixed = g.mix(gate, ex)
    combine = rng.integers(4)
    if combine == 0:
        hid = g.add(hid, g.mul(mixed, g.sigmoid(z)))
    elif combine == 1:
        hid = g.sub(hid, mixed)
    elif combine == 2:
        hid = g.div(g.add(hid, mixed), g.lin(g.exp(z), c=1.0))
    else:
        hid = g.mul(hid, g.lin(mixed, c=0.5))
    out = g.affine(hid, par("W2", (h, k)), par("b2", (k,)))
    choice = rng.integers(4)
    if choice == 0:
        loss = g.mse(out, inp("y", rng.normal(size=(B, k))))
    elif choice == 1:
        loss = g.bce(g.sigmoid(out), inp("y", (rng.random((B, k)) < 0.5).astype(float)))
    elif choice == 2:
        loss = g.mean(g.log(g.lin(g.sigmoid(out), c=0.1)))
    else:
        st = g.stack(g.take(out, 0), g.sum_axis(out, -1), axis=-1)
        loss = g.scale(g.sum(g.mul(st, st)), 0.25)
    g.output("loss", loss)
    return g, leaves, {"loss": 1.0}


def architecture_fd_case(kind: str, rng, width: int = 8, batch: int = 6):
    """Graph, perturbed leaves and random seeds for one architecture."""
    from ranmtl.models import ArchitectureConfig, build_graph, init_params
    from ranmtl.tasks import TASKS

    tasks = ("SC",) if kind == "STL" else ("SC", "PS", "IN", "LOS")
    arch = ArchitectureConfig(kind, tasks, shared_width=width)
    graph = build_graph(arch)
    params = init_params(arch, rng)
    leaves = {n: v + rng.normal(0.0, 0.1, size=v.shape) if not n.endswith("dselect/z") else v.copy()
              for n, v in params.tensors.items()}
    leaves["x"] = rng.normal(size=(batch, arch.input_dim))
    for t in tasks:
        dim = TASKS[t].dim
        leaves[f"y:{t}"] = (rng.random((batch, dim)) < 0.5).astype(float) if TASKS[t].is_classification \
            else rng.normal(size=(batch, dim))
    seeds = {f"loss:{t}": float(rng.uniform(0.5, 1.5)) for t in tasks}
    if kind == "DSelectK":
        seeds.update({f"reg:{t}": 1.0 for t in tasks})
    return graph, leaves, seeds
