"""Task-balancing strategies.

Loss balancers (EW, UW, DWA, GLS, RLW) turn per-task losses into one scalar;
the trainer needs only ``d total / d L_t`` to weight a single backward pass,
which each balancer obtains by differentiating a small scalar graph.

Gradient balancers (MGDA, CAGrad, GradNorm, PCGrad, GradVac, GradDrop) take
the matrix of flattened shared-parameter gradients ``G`` with one row per task
and return the update direction for the shared parameters.  Task-specific
gradients never pass through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph

LOSS_BALANCERS = ("EW", "UW", "DWA", "GLS", "RLW")
GRADIENT_BALANCERS = ("MGDA", "CAGrad", "GradNorm", "PCGrad", "GradVac", "GradDrop")
STRATEGIES = LOSS_BALANCERS + GRADIENT_BALANCERS

DEFAULTS = {
    "DWA": {"temperature": 2.0},
    "GLS": {"floor": 1e-8},
    "MGDA": {"max_iter": 250, "tol": 1e-10},
    "CAGrad": {"c": 0.4, "steps": 200, "lr": 0.1},
    "GradNorm": {"alpha": 1.5, "lr": 0.025},
    "GradVac": {"beta": 1e-2},
}


# -- scalar loss graphs ------------------------------------------------------


def _weighted_graph(T: int) -> Graph:
    g = Graph()
    L = g.param("L", (T,))
    w = g.input("w", (T,))
    g.output("total", g.sum(g.mul(w, L)))
    return g


def _uw_graph(T: int) -> Graph:
    g = Graph()
    L = g.param("L", (T,))
    s = g.param("s", (T,))
    prec = g.exp(g.scale(s, -1.0))
    g.output("total", g.scale(g.sum(g.add(g.mul(prec, L), s)), 0.5))
    return g


def _gls_graph(T: int, floor: float) -> Graph:
    g = Graph()
    L = g.param("L", (T,))
    g.output("total", g.exp(g.mean(g.log(g.clamp_min(L, floor)))))
    return g


def ew_combine(losses) -> float:
    return float(np.sum(losses))


def uw_combine(losses, log_vars) -> float:
    losses, s = np.asarray(losses, float), np.asarray(log_vars, float)
    return float(0.5 * np.sum(np.exp(-s) * losses + s))


def gls_combine(losses, floor: float = 1e-8) -> float:
    L = np.maximum(np.asarray(losses, float), floor)
    return float(np.exp(np.mean(np.log(L))))


def dwa_weights(history: Sequence[np.ndarray], epoch: int, n_tasks: int, temperature: float = 2.0) -> np.ndarray:
    """DWA weights for ``epoch`` from the last two epoch-average loss vectors."""
    if epoch < 2 or len(history) < 2:
        return np.ones(n_tasks)
    prev, prev2 = np.asarray(history[-1], float), np.asarray(history[-2], float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.where(prev2 > 0, prev / prev2, 1.0)
    z = np.minimum(r, 1e300) / temperature
    e = np.exp(z - z.max())
    return n_tasks * e / e.sum()


def rlw_weights(rng: np.random.Generator, n_tasks: int) -> np.ndarray:
    z = rng.standard_normal(n_tasks)
    e = np.exp(z - z.max())
    return e / e.sum()


# -- gradient balancers ------------------------------------------------------


def mgda_direction(G: np.ndarray, max_iter: int = 250, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Min-norm point of the convex hull of the rows of ``G``.

    Wolfe's min-norm-point method: a Frank-Wolfe vertex oracle grows the
    active set and each minor cycle moves to the affine minimizer over it,
    dropping atoms whose weight would turn negative.  Stops once the
    Frank-Wolfe duality gap is below ``tol``.  The uniform point is returned
    when it is already optimal (e.g. identical gradients).
    """
    G = np.asarray(G, dtype=np.float64)
    T = len(G)
    alpha = np.full(T, 1.0 / T)
    if not np.any(G):
        return alpha, np.zeros(G.shape[1])
    M = G @ G.T
    grad = M @ alpha
    if alpha @ grad - grad.min() < tol:
        return alpha, alpha @ G
    start = int(np.argmin(np.diag(M)))
    lam = np.zeros(T)
    lam[start] = 1.0
    active = [start]
    for _ in range(max_iter):
        grad = M @ lam
        j = int(np.argmin(grad))
        if lam @ grad - grad[j] < tol or j in active:
            break
        active.append(j)
        for _ in range(len(active)):
            n = len(active)
            kkt = np.ones((n + 1, n + 1))
            kkt[:n, :n] = M[np.ix_(active, active)]
            kkt[n, n] = 0.0
            rhs = np.zeros(n + 1)
            rhs[n] = 1.0
            mu = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n]
            cur = lam[active]
            if (mu > 0).all():
                lam[active] = mu
                break
            neg = mu <= 0
            theta = float(np.min(cur[neg] / (cur[neg] - mu[neg])))
            new = cur + theta * (mu - cur)
            lam[active] = np.where(new > 1e-15, new, 0.0)
            active = [a for a in active if lam[a] > 0]
    lam = np.maximum(lam, 0.0)
    lam /= lam.sum()
    return lam, lam @ G


_RANKS = np.arange(1, 65, dtype=np.float64)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ranks = _RANKS[:len(v)] if len(v) <= len(_RANKS) else np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u * ranks > css)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def cagrad_objective(w, M, c) -> float:
    """``g_w . g0 + c ||g0|| ||g_w||`` written through the Gram matrix."""
    T = len(M)
    b = np.full(T, 1.0 / T)
    g0_norm = np.sqrt(max(b @ M @ b, 0.0))
    return float(w @ M @ b + c * g0_norm * np.sqrt(max(w @ M @ w, 0.0)))


def cagrad_weights(M: np.ndarray, c: float, steps: int = 200, lr: float = 0.1) -> np.ndarray:
    T = len(M)
    scale = np.mean(np.diag(M))
    if scale <= 0:
        return np.full(T, 1.0 / T)
    A = M / scale  # step size acts on a unit-scale problem
    b = np.full(T, 1.0 / T)
    g0_norm = np.sqrt(max(b @ A @ b, 0.0))
    Ab = A @ b
    w = b.copy()
    Aw = Ab.copy()
    best, best_f = w, float(w @ Ab + c * g0_norm * np.sqrt(max(w @ Aw, 0.0)))
    for _ in range(steps):
        gw_norm = np.sqrt(max(w @ Aw, 1e-20))
        w_next = project_simplex(w - lr * (Ab + (c * g0_norm / gw_norm) * Aw))
        if np.array_equal(w_next, w):
            break  # fixed point: later iterates would repeat it
        w = w_next
        Aw = A @ w
        f = float(w @ Ab + c * g0_norm * np.sqrt(max(w @ Aw, 0.0)))
        if f < best_f:
            best, best_f = w, f
    return best


def cagrad_direction(G: np.ndarray, c: float = 0.4, steps: int = 200, lr: float = 0.1) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    g0 = G.mean(axis=0)
    if c == 0:
        return g0
    w = cagrad_weights(G @ G.T, c, steps, lr)
    gw = w @ G
    gw_norm = np.linalg.norm(gw)
    if gw_norm == 0:
        return g0
    return g0 + (c * np.linalg.norm(g0) / gw_norm) * gw


def gradnorm_update(G, losses, weights, initial_losses, alpha: float = 1.5, lr: float = 0.025) -> np.ndarray:
    """One subgradient step of the GradNorm objective on the task weights.

    ``G_t = ||w_t g_t||`` is pulled towards ``mean(G) * r_t**alpha`` with the
    target held constant; weights are then renormalized to sum to ``T``.
    """
    G = np.asarray(G, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    T = len(w)
    norms = np.linalg.norm(G, axis=1)
    Gw = w * norms
    ratio = np.asarray(losses, float) / np.maximum(np.asarray(initial_losses, float), 1e-12)
    mean_ratio = ratio.mean()
    r = ratio / mean_ratio if mean_ratio > 0 else np.ones(T)
    target = Gw.mean() * r**alpha
    w = w - lr * np.sign(Gw - target) * norms
    w = np.maximum(w, 1e-6)
    return T * w / w.sum()


def pcgrad_project(G: np.ndarray, rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Per-task surgered gradients (rows); sum them for the update.

    ``trace`` collects ``(i, j, g_i' . g_j)`` after each processed pair.
    """
    G = np.asarray(G, dtype=np.float64)
    T = len(G)
    sq = np.einsum("ij,ij->i", G, G)
    out = G.copy()
    for i in range(T):
        gi = out[i]
        for j in rng.permutation(T):
            if j == i or sq[j] == 0:
                continue
            dot = gi @ G[j]
            if dot < 0:
                gi -= (dot / sq[j]) * G[j]
            if trace is not None:
                trace.append((i, int(j), float(gi @ G[j])))
    return out


def gradvac_adjust(G: np.ndarray, phi: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Aligns every pair towards its similarity target ``phi`` (updated in place)."""
    G = np.asarray(G, dtype=np.float64)
    T = len(G)
    norms = np.linalg.norm(G, axis=1)
    out = G.copy()
    for i in range(T):
        gi = out[i]
        for j in rng.permutation(T):
            if j == i:
                continue
            ni = np.linalg.norm(gi)
            if ni < 1e-12 or norms[j] < 1e-12:
                continue
            cos = float(gi @ G[j] / (ni * norms[j]))
            cos = min(1.0, max(-1.0, cos))
            target = phi[i, j]
            root = np.sqrt(max(1.0 - target**2, 0.0))
            if cos < target and root > 1e-12:
                lam = ni * (target * np.sqrt(1.0 - cos**2) - cos * root) / (norms[j] * root)
                gi += lam * G[j]
            phi[i, j] = (1.0 - beta) * target + beta * cos
    return out


def graddrop_mask(G: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    total = G.sum(axis=0)
    mag = np.abs(G).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        purity = np.where(mag > 0, 0.5 * (1.0 + total / mag), 0.5)
    u = rng.uniform(size=G.shape[1])
    keep_pos = u < purity
    pos = np.where(G > 0, G, 0.0).sum(axis=0)
    neg = np.where(G < 0, G, 0.0).sum(axis=0)
    return np.where(keep_pos, pos, neg)


# -- stateful wrapper --------------------------------------------------------


@dataclass
class WeightingState:
    strategy: str
    n_tasks: int
    loss_history: list = field(default_factory=list)  # epoch-mean losses, newest last
    log_vars: np.ndarray | None = None
    task_weights: np.ndarray | None = None
    initial_losses: np.ndarray | None = None
    similarity: np.ndarray | None = None
    rng: np.random.Generator | None = None

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else a.tolist()

        return {
            "strategy": self.strategy,
            "n_tasks": self.n_tasks,
            "loss_history": [list(map(float, h)) for h in self.loss_history],
            "log_vars": arr(self.log_vars),
            "task_weights": arr(self.task_weights),
            "initial_losses": arr(self.initial_losses),
            "similarity": arr(self.similarity),
            "rng": None if self.rng is None else self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightingState":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=np.float64)

        rng = None
        if d.get("rng") is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = d["rng"]
        return cls(d["strategy"], d["n_tasks"], [np.asarray(h) for h in d["loss_history"]],
                   arr(d["log_vars"]), arr(d["task_weights"]), arr(d["initial_losses"]),
                   arr(d["similarity"]), rng)


class Weighting:
    """One strategy instance bound to a task list."""

    def __init__(self, name: str, tasks: Sequence[str], seed: int = 0, **hyper):
        if name not in STRATEGIES:
            raise ValueError(f"unknown weighting strategy {name!r}")
        self.name = name
        self.tasks = tuple(tasks)
        T = len(self.tasks)
        self.hyper = {**DEFAULTS.get(name, {}), **hyper}
        self.state = WeightingState(name, T, rng=np.random.default_rng([seed, 7]))
        self.epoch = 0
        if name == "UW":
            self.state.log_vars = np.zeros(T)
            self._graph = _uw_graph(T)
        elif name == "GLS":
            self._graph = _gls_graph(T, self.hyper["floor"])
        elif name in ("EW", "DWA", "RLW"):
            self._graph = _weighted_graph(T)
        if name == "GradNorm":
            self.state.task_weights = np.ones(T)
        if name == "GradVac":
            self.state.similarity = np.zeros((T, T))
        self.param_grads: dict[str, np.ndarray] = {}

    @property
    def kind(self) -> str:
        return "loss" if self.name in LOSS_BALANCERS else "grad"

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Trainable strategy parameters (UW log-variances)."""
        return {"s": self.state.log_vars} if self.name == "UW" else {}

    def loss_weights(self) -> np.ndarray:
        T = self.state.n_tasks
        if self.name == "DWA":
            return dwa_weights(self.state.loss_history, self.epoch, T, self.hyper["temperature"])
        if self.name == "RLW":
            return rlw_weights(self.state.rng, T)
        return np.ones(T)

    def combine(self, losses: np.ndarray) -> tuple[float, np.ndarray]:
        """Total loss and its derivative with respect to each task loss."""
        L = np.asarray(losses, dtype=np.float64)
        if self.name == "UW":
            tr = self._graph.forward({"L": L, "s": self.state.log_vars})
            grads = tr.backward("total")
            self.param_grads = {"s": grads["s"]}
            return float(tr["total"]), grads["L"]
        if self.name == "GLS":
            tr = self._graph.forward({"L": L})
            return float(tr["total"]), tr.backward("total")["L"]
        w = self.loss_weights()
        tr = self._graph.forward({"L": L, "w": w})
        return float(tr["total"]), tr.backward("total")["L"]

    def aggregate(self, G: np.ndarray, losses: np.ndarray) -> np.ndarray:
        """Shared-parameter update direction from per-task gradients."""
        st, hp = self.state, self.hyper
        if self.name == "MGDA":
            return mgda_direction(G, hp["max_iter"], hp["tol"])[1]
        if self.name == "CAGrad":
            return cagrad_direction(G, hp["c"], hp["steps"], hp["lr"])
        if self.name == "GradNorm":
            if st.initial_losses is None:
                st.initial_losses = np.asarray(losses, dtype=np.float64).copy()
            d = st.task_weights @ G
            st.task_weights = gradnorm_update(G, losses, st.task_weights, st.initial_losses,
                                              hp["alpha"], hp["lr"])
            return d
        if self.name == "PCGrad":
            return pcgrad_project(G, st.rng).sum(axis=0)
        if self.name == "GradVac":
            return gradvac_adjust(G, st.similarity, hp["beta"], st.rng).sum(axis=0)
        if self.name == "GradDrop":
            return graddrop_mask(G, st.rng)
        raise TypeError(f"{self.name} is a loss balancer")

    def end_epoch(self, mean_losses: np.ndarray) -> None:
        self.state.loss_history = (self.state.loss_history + [np.asarray(mean_losses, float)])[-2:]
        self.epoch += 1
