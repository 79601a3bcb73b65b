"""Distance embedding, minibatch OT couplings, flow matching and ODE integration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp
from torch import Tensor

from .geometry import GeodesicModel, MetricField, PairSampler, path_and_velocity
from .nn import (
    DTYPE, MLP, ModelSpec, NonFiniteError, OptState, SinusoidalEmbedding, as_tensor, ema_copy, fit, freeze, jvp,
    make_opt,
)
from .score import TrainSettings


# --------------------------------------------------------------------------- embedding / distance

class EmbeddingModel:
    """f: R^d -> R^d'; with d' = d the raw input is added to the output (skip connection)."""

    def __init__(self, net: MLP | None, dim: int):
        self.net = net
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        return x if self.net is None else self.net(x)

    def embed(self, x) -> np.ndarray:
        with torch.no_grad():
            return self(as_tensor(np.atleast_2d(x))).numpy()

    def frozen_copy(self, opt: OptState | None = None) -> "EmbeddingModel":
        if self.net is None:
            return self
        return EmbeddingModel(ema_copy(self.net, opt) if opt is not None else freeze(self.net), self.dim)


def identity_embedding(dim: int) -> EmbeddingModel:
    return EmbeddingModel(None, dim)


def make_embedding_model(dim: int, out_dim: int | None = None, *, hidden_dim=512, n_layers=4, seed=0) -> EmbeddingModel:
    out_dim = out_dim or dim
    spec = ModelSpec("embedding", dim, out_dim, hidden_dim, n_layers, input_skip=out_dim == dim)
    return EmbeddingModel(MLP(spec, seed=seed, zero_last=out_dim == dim), dim)


def distance(f: EmbeddingModel, x, y) -> np.ndarray:
    """||f(x) - f(y)|| row-wise."""
    return np.linalg.norm(f.embed(x) - f.embed(y), axis=-1)


def pairwise_distance(f: EmbeddingModel, a, b) -> np.ndarray:
    fa, fb = f.embed(a), f.embed(b)
    d2 = (fa ** 2).sum(1)[:, None] + (fb ** 2).sum(1)[None, :] - 2 * fa @ fb.T
    return np.sqrt(np.maximum(d2, 0.0))


def _sample_path(geodesic: GeodesicModel, x0: Tensor, x1: Tensor, sigma_flow: float, gen: torch.Generator,
                 t=None, eps=None) -> tuple[Tensor, Tensor, Tensor]:
    B = x0.shape[0]
    if t is None:
        t = torch.rand(B, 1, generator=gen, dtype=DTYPE)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
    xt, vt = path_and_velocity(geodesic, x0, x1, t, eps, sigma_flow)
    return t, xt.detach(), vt.detach()


def embedding_loss(f: EmbeddingModel, geodesic: GeodesicModel, metric: MetricField, x0, x1,
                   sigma_flow: float = 0.1, seed=0, form: str = "squared", t=None, eps=None) -> Tensor:
    """Mean of (||d/dt f(x_t)||^2 - G(x_t)||dx_t/dt||^2)^2 ('squared') or its absolute value ('abs')."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    _, xt, vt = _sample_path(geodesic, x0, x1, sigma_flow, gen, t, eps)
    with torch.no_grad():
        target = metric(xt) * (vt ** 2).sum(-1)
    _, df = jvp(f, xt, vt)
    res = (df ** 2).sum(-1) - target
    if form == "squared":
        return (res ** 2).mean()
    if form == "abs":
        return res.abs().mean()
    raise ValueError(f"unknown embedding loss form {form!r}")


def train_embedding(geodesic: GeodesicModel, metric: MetricField, sampler: PairSampler, settings: TrainSettings,
                    dim: int, *, hidden_dim=512, n_layers=4, sigma_flow=0.1, form="squared", seed=0,
                    model: EmbeddingModel | None = None) -> tuple[EmbeddingModel, OptState, list[float]]:
    f = model or make_embedding_model(dim, hidden_dim=hidden_dim, n_layers=n_layers, seed=seed)
    opt = make_opt(f.net, settings.lr, settings.grad_clip, settings.ema_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)

    def loss_fn(step: int) -> Tensor:
        x0, x1 = sampler(rng, settings.batch_size)
        return embedding_loss(f, geodesic, metric, x0, x1, sigma_flow, gen, form)

    trace = fit(f.net, opt, loss_fn, settings.steps, "embedding")
    return f, opt, trace


# --------------------------------------------------------------------------- OT coupling

@dataclass(frozen=True)
class Coupling:
    rows: np.ndarray
    cols: np.ndarray
    cost: float          # total cost of the selected pairs
    solver: str

    def apply(self, a, b) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(a)[self.rows], np.asarray(b)[self.cols]


def cost_matrix(a, b, cost: str | Callable | EmbeddingModel = "euclidean", power: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if isinstance(cost, EmbeddingModel):
        d = pairwise_distance(cost, a, b)
    elif callable(cost):
        d = np.asarray(cost(a, b), dtype=np.float64)
    elif cost == "euclidean":
        d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))
    else:
        raise ValueError(f"unknown cost {cost!r}")
    return d if power == 1.0 else d ** power


def assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-cost perfect matching of a square cost matrix (shortest augmenting paths)."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"exact assignment needs a square cost matrix, got {c.shape}")
    if not np.isfinite(c).all():
        raise NonFiniteError("ot_couple", detail="cost matrix has non-finite entries")
    return linear_sum_assignment(c)


def sinkhorn_plan(cost: np.ndarray, reg: float = 0.05, n_iter: int = 500, tol: float = 1e-9) -> np.ndarray:
    """Entropic OT plan between uniform marginals (log-domain Sinkhorn)."""
    n, m = cost.shape
    scale = cost.max() if cost.max() > 0 else 1.0
    logk = -cost / (reg * scale)
    loga, logb = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)
    for _ in range(n_iter):
        f_new = loga - logsumexp(logk + g[None, :], axis=1)
        g = logb - logsumexp(logk + f_new[:, None], axis=0)
        if np.max(np.abs(f_new - f)) < tol:
            f = f_new
            break
        f = f_new
    return np.exp(logk + f[:, None] + g[None, :])


def ot_couple(batch0, batch1, cost: str | Callable | EmbeddingModel = "euclidean", solver: str = "exact",
              power: float = 1.0, reg: float = 0.05, seed: int | np.random.Generator = 0) -> Coupling:
    """Pair the rows of two batches by minibatch OT under ``cost`` ** ``power``."""
    c = cost_matrix(batch0, batch1, cost, power)
    if solver == "exact":
        rows, cols = assignment(c)
    elif solver == "sinkhorn":
        plan = sinkhorn_plan(c, reg)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        rows = np.arange(c.shape[0])
        p = plan / plan.sum(1, keepdims=True)
        cols = np.array([rng.choice(c.shape[1], p=pi) for pi in p])
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return Coupling(rows, cols, float(c[rows, cols].sum()), solver)


# --------------------------------------------------------------------------- flow

class FlowModel:
    """v(t, x): MLP on x conditioned on a time embedding."""

    def __init__(self, net: MLP, n_freq: int = 32):
        self.net = net
        self.n_freq = n_freq
        self.time_emb = SinusoidalEmbedding(n_freq, "time")

    @property
    def dim(self) -> int:
        return self.net.spec.in_dim

    def __call__(self, t, x: Tensor) -> Tensor:
        x = as_tensor(x)
        t = as_tensor(t).reshape(-1)
        return self.net(x, self.time_emb(t))

    def frozen_copy(self, opt: OptState | None = None) -> "FlowModel":
        return FlowModel(ema_copy(self.net, opt) if opt is not None else freeze(self.net), self.n_freq)


def make_flow_model(dim: int, *, hidden_dim=512, n_layers=4, n_freq=32, seed=0) -> FlowModel:
    spec = ModelSpec("flow", dim, dim, hidden_dim, n_layers, cond_dim=2 * n_freq)
    return FlowModel(MLP(spec, seed=seed), n_freq)


def flow_loss(flow: FlowModel, geodesic: GeodesicModel, x0, x1, sigma_flow: float = 0.1, seed=0,
              t_start=0.0, t_end=1.0, s=None, eps=None) -> Tensor:
    """Mean ||v(t, x_s) - (dx_s/ds)/(t_end - t_start)||^2 over coupled pairs.

    s ~ U[0,1] parameterises the conditional path; the flow sees the global
    time t = t_start + s (t_end - t_start). Per-row interval ends are allowed.
    """
    x0, x1 = as_tensor(x0), as_tensor(x1)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    s, xt, vt = _sample_path(geodesic, x0, x1, sigma_flow, gen, s, eps)
    ta = _col(t_start, x0)
    tb = _col(t_end, x0)
    span = tb - ta
    t = ta + as_tensor(s).reshape(-1, 1) * span
    return ((flow(t, xt) - vt / span) ** 2).sum(-1).mean()


def _col(v, like: Tensor) -> Tensor:
    v = as_tensor(v)
    if v.dim() == 0:
        v = v.expand(like.shape[0])
    return v.reshape(-1, 1)


@dataclass(frozen=True)
class Interval:
    label_start: int
    label_end: int
    t_start: float
    t_end: float


def coupled_batch_sampler(intervals: Sequence[tuple[np.ndarray, np.ndarray, float, float]], batch_size: int,
                          cost: str | Callable | EmbeddingModel = "euclidean", coupling: str = "ot",
                          power: float = 2.0, solver: str = "exact"):
    """Per step: for every interval draw batch_size points from each end, couple, stack."""

    def sample(rng: np.random.Generator):
        x0s, x1s, tas, tbs = [], [], [], []
        for a, b, ta, tb in intervals:
            xa = a[rng.integers(len(a), size=batch_size)]
            xb = b[rng.integers(len(b), size=batch_size)]
            if coupling == "ot":
                xa, xb = ot_couple(xa, xb, cost, solver, power, seed=rng).apply(xa, xb)
            elif coupling != "product":
                raise ValueError(f"unknown coupling {coupling!r}")
            x0s.append(xa)
            x1s.append(xb)
            tas.append(np.full(batch_size, ta))
            tbs.append(np.full(batch_size, tb))
        return np.vstack(x0s), np.vstack(x1s), np.concatenate(tas), np.concatenate(tbs)

    return sample


def train_flow(geodesic: GeodesicModel, batches, settings: TrainSettings, dim: int, *, hidden_dim=512, n_layers=4,
               n_freq=32, sigma_flow=0.1, seed=0, model: FlowModel | None = None) -> tuple[FlowModel, OptState, list[float]]:
    """``batches(rng)`` returns coupled (x0, x1, t_start, t_end) rows."""
    flow = model or make_flow_model(dim, hidden_dim=hidden_dim, n_layers=n_layers, n_freq=n_freq, seed=seed)
    opt = make_opt(flow.net, settings.lr, settings.grad_clip, settings.ema_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)

    def loss_fn(step: int) -> Tensor:
        x0, x1, ta, tb = batches(rng)
        return flow_loss(flow, geodesic, x0, x1, sigma_flow, gen, ta, tb)

    trace = fit(flow.net, opt, loss_fn, settings.steps, "flow")
    return flow, opt, trace


# --------------------------------------------------------------------------- integration

def integrate(field: Callable[[Tensor, Tensor], Tensor], x_start, t_span=(0.0, 1.0), n_steps: int = 100,
              method: str = "rk4") -> np.ndarray:
    """Fixed-step Euler/RK4; returns the (n_steps+1, n, d) trajectory."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    t0, t1 = float(t_span[0]), float(t_span[1])
    h = (t1 - t0) / n_steps
    x = as_tensor(np.atleast_2d(x_start)).clone()
    traj = [x.numpy().copy()]

    def v(t, y):
        return field(torch.full((y.shape[0],), t, dtype=DTYPE), y)

    with torch.no_grad():
        for i in range(n_steps):
            t = t0 + i * h
            if method == "euler":
                x = x + h * v(t, x)
            else:
                k1 = v(t, x)
                k2 = v(t + h / 2, x + h / 2 * k1)
                k3 = v(t + h / 2, x + h / 2 * k2)
                k4 = v(t + h, x + h * k3)
                x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not torch.isfinite(x).all():
                raise NonFiniteError("integrate", step=i + 1)
            traj.append(x.numpy().copy())
    return np.stack(traj)


# --------------------------------------------------------------------------- timepoint schedule

@dataclass(frozen=True)
class HoldoutTarget:
    label: int
    label_start: int
    label_end: int
    t_start: float
    t_target: float
    fraction: float


@dataclass(frozen=True)
class TimeSchedule:
    intervals: list[Interval]
    targets: list[HoldoutTarget]
    observed: list[int]

    def t_of(self, label: int) -> float:
        lo, hi = self.observed[0], self.observed[-1]
        return (label - lo) / (hi - lo)


def multi_timepoint_schedule(timepoints: Sequence[int], holdout: int | Sequence[int] = ()) -> TimeSchedule:
    """Consecutive observed labels become flow intervals on t in [0, 1], proportional to label gaps."""
    labels = sorted({int(t) for t in timepoints})
    held = {int(holdout)} if np.ndim(holdout) == 0 else {int(h) for h in holdout}
    unknown = held - set(labels)
    if unknown:
        raise ValueError(f"holdout label(s) {sorted(unknown)} not among timepoints {labels}")
    observed = [t for t in labels if t not in held]
    if len(observed) < 2:
        raise ValueError("need at least two observed timepoints")
    lo, hi = observed[0], observed[-1]

    def t_of(label):
        return (label - lo) / (hi - lo)

    intervals = [Interval(a, b, t_of(a), t_of(b)) for a, b in zip(observed[:-1], observed[1:])]
    targets = []
    for h in sorted(held):
        before = [t for t in observed if t < h]
        after = [t for t in observed if t > h]
        if not before or not after:
            raise ValueError(f"holdout {h} has no observed timepoint on both sides")
        a, b = before[-1], after[0]
        targets.append(HoldoutTarget(h, a, b, t_of(a), t_of(h), (h - a) / (b - a)))
    return TimeSchedule(intervals, targets, observed)


def write_trajectory_csv(path, traj: np.ndarray, t_span=(0.0, 1.0)) -> None:
    """Rows (traj_id, step, t, f0..f{d-1}) for a (steps+1, n, d) trajectory."""
    n_steps = traj.shape[0] - 1
    d = traj.shape[2]
    ts = np.linspace(t_span[0], t_span[1], n_steps + 1)
    with open(path, "w") as fh:
        fh.write(",".join(["traj_id", "step", "t"] + [f"f{i}" for i in range(d)]) + "\n")
        for j in range(traj.shape[1]):
            for s in range(n_steps + 1):
                vals = ",".join(repr(float(v)) for v in traj[s, j])
                fh.write(f"{j},{s},{float(ts[s])!r},{vals}\n")
