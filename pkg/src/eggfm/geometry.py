"""Energy-induced conformal metric and the learned geodesic interpolant.

G(x) = gamma + max(lambda * exp(clip(E(x)) - e_lo), floor): the energy is
clipped to a quantile window [e_lo, e_hi] fitted on training data and
referenced to its lower end (E is only defined up to an additive constant),
then floored at a lower quantile of lambda*exp(.) over the same data.

Paths are x_t = (1-t) x0 + t x1 + t(1-t) psi(x0, x1, t) + sigma_flow eps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import blob
from .nn import (
    DTYPE, MLP, ModelSpec, OptState, SinusoidalEmbedding, as_tensor, ema_copy, fit, freeze, jvp, make_opt,
)
from .score import EnergyModel, TrainSettings, energy_at


# --------------------------------------------------------------------------- metric

@dataclass
class MetricField:
    energy: EnergyModel | None
    gamma: float = 0.2
    lam: float = 10.0
    e_lo: float = 0.0
    e_hi: float = 0.0
    floor: float = 0.0
    floor_mode: str = "metric"     # floor lambda*exp(clip E) ("metric") or E itself ("energy")
    cluster_offsets: np.ndarray | None = None
    sigma: float | None = None

    @property
    def stratified(self) -> bool:
        return self.energy is not None and self.energy.stratified

    def metric_energy(self, x: Tensor) -> Tensor:
        """Scalar energy driving the metric; a soft-min over per-cluster energies when stratified."""
        if self.energy is None:
            return torch.zeros(x.shape[:-1], dtype=DTYPE)
        s = self.sigma if self.sigma is not None else self.energy.schedule.sigma_min
        sig = torch.full((x.shape[0],), float(s), dtype=DTYPE)
        if not self.stratified:
            return self.energy.energy(x, sig)
        J = self.energy.n_clusters
        per = []
        for j in range(J):
            ej = self.energy.energy(x, sig, torch.full((x.shape[0],), j)) - float(self.cluster_offsets[j])
            per.append(ej)
        stack = torch.stack(per, dim=-1)
        return -torch.logsumexp(-stack, dim=-1)

    def __call__(self, x: Tensor) -> Tensor:
        """G(x) for a batch of points; differentiable in x."""
        e = self.metric_energy(x)
        if self.floor_mode == "energy":
            lo = max(self.e_lo, self._energy_floor())
            ce = torch.clamp(e, lo, max(self.e_hi, lo)) - self.e_lo
            return self.gamma + self.lam * torch.exp(ce)
        ce = torch.clamp(e, self.e_lo, self.e_hi) - self.e_lo
        raw = self.lam * torch.exp(ce)
        return self.gamma + torch.clamp(raw, min=self.floor)

    def _energy_floor(self) -> float:
        if self.lam <= 0 or self.floor <= 0:
            return -np.inf
        return float(np.log(self.floor / self.lam)) + self.e_lo

    def sidecar(self) -> dict:
        return {
            "gamma": self.gamma, "lam": self.lam, "e_lo": self.e_lo, "e_hi": self.e_hi, "floor": self.floor,
            "floor_mode": self.floor_mode, "sigma": self.sigma,
            "cluster_offsets": None if self.cluster_offsets is None else [float(c) for c in self.cluster_offsets],
            "identity": self.energy is None,
        }

    @classmethod
    def from_sidecar(cls, energy: EnergyModel | None, side: dict) -> "MetricField":
        offs = side.get("cluster_offsets")
        return cls(energy, side["gamma"], side["lam"], side["e_lo"], side["e_hi"], side["floor"],
                   side.get("floor_mode", "metric"), None if offs is None else np.asarray(offs), side.get("sigma"))


def constant_metric(value: float = 1.0) -> MetricField:
    """G(x) = value everywhere (identity metric when value = 1)."""
    return MetricField(None, gamma=float(value), lam=0.0)


def fit_metric(energy: EnergyModel | None, train_points, *, gamma: float = 0.2, lam: float = 10.0,
               clip_quantiles=(0.05, 0.98), floor_quantile: float = 0.05, floor_mode: str = "metric",
               clusters=None, chunk: int = 4096) -> MetricField:
    """Cache the energy window and metric floor on training data.

    For a cluster-conditioned energy, each cluster's energy is first
    referenced to its own lower quantile on that cluster's points.
    """
    if floor_mode not in ("metric", "energy"):
        raise ValueError("floor_mode must be 'metric' or 'energy'")
    if energy is None:
        return MetricField(None, gamma, lam, 0.0, 0.0, 0.0, floor_mode)
    x = np.asarray(train_points, dtype=np.float64)
    offsets = None
    if energy.stratified:
        cl = np.zeros(len(x), dtype=np.int64) if clusters is None else np.asarray(clusters)
        offsets = np.zeros(energy.n_clusters)
        for j in range(energy.n_clusters):
            pts = x[cl == j]
            if len(pts):
                offsets[j] = np.quantile(energy_at(energy, pts, cluster=j), clip_quantiles[0])
    mf = MetricField(energy, gamma, lam, 0.0, 0.0, 0.0, floor_mode, offsets)
    with torch.no_grad():
        e = np.concatenate([mf.metric_energy(as_tensor(x[i:i + chunk])).numpy()
                            for i in range(0, len(x), chunk)])
    mf.e_lo, mf.e_hi = (float(v) for v in np.quantile(e, clip_quantiles))
    raw = lam * np.exp(np.clip(e, mf.e_lo, mf.e_hi) - mf.e_lo)
    mf.floor = float(np.quantile(raw, floor_quantile))
    return mf


def metric_at(metric: MetricField, x, chunk: int = 8192) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with torch.no_grad():
        return np.concatenate([metric(as_tensor(x[i:i + chunk])).numpy() for i in range(0, len(x), chunk)])


def save_metric(metric: MetricField, path) -> None:
    blob.save(path, "metric", metric.sidecar(), {})


def load_metric_sidecar(path) -> dict:
    header, _ = blob.load(path, kind="metric")
    return header


# --------------------------------------------------------------------------- geodesic

class GeodesicModel:
    """psi(x0, x1, t): an MLP on [x0, x1] conditioned on a time embedding; ``net=None`` means psi = 0."""

    def __init__(self, net: MLP | None, dim: int, n_freq: int = 32):
        self.net = net
        self.dim = dim
        self.n_freq = n_freq
        self.time_emb = SinusoidalEmbedding(n_freq, "time")

    def psi(self, x0: Tensor, x1: Tensor, t: Tensor) -> Tensor:
        if self.net is None:
            return torch.zeros_like(x0)
        return self.net(torch.cat([x0, x1], dim=-1), self.time_emb(t.reshape(-1)))

    def frozen_copy(self, opt: OptState | None = None) -> "GeodesicModel":
        if self.net is None:
            return self
        net = ema_copy(self.net, opt) if opt is not None else freeze(self.net)
        return GeodesicModel(net, self.dim, self.n_freq)


def make_geodesic_model(dim: int, *, hidden_dim=512, n_layers=4, n_freq=32, seed=0) -> GeodesicModel:
    spec = ModelSpec("geodesic", 2 * dim, dim, hidden_dim, n_layers, cond_dim=2 * n_freq)
    return GeodesicModel(MLP(spec, seed=seed, zero_last=True), dim, n_freq)


def _col(t, like: Tensor) -> Tensor:
    t = as_tensor(t)
    if t.dim() == 0:
        t = t.expand(like.shape[0])
    return t.reshape(-1, 1)


def path_point(model: GeodesicModel, x0, x1, t, eps=None, sigma_flow: float = 0.0) -> Tensor:
    x0, x1 = as_tensor(x0), as_tensor(x1)
    tc = _col(t, x0)
    xt = (1 - tc) * x0 + tc * x1 + tc * (1 - tc) * model.psi(x0, x1, tc)
    if eps is not None and sigma_flow:
        xt = xt + sigma_flow * as_tensor(eps)
    return xt


def path_and_velocity(model: GeodesicModel, x0, x1, t, eps=None, sigma_flow: float = 0.0) -> tuple[Tensor, Tensor]:
    """(x_t, dx_t/dt); the noise term is constant in t so it only shifts x_t."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    tc = _col(t, x0)
    if model.net is None:
        psi = dpsi = torch.zeros_like(x0)
    else:
        psi, dpsi = jvp(lambda s: model.psi(x0, x1, s), tc, torch.ones_like(tc))
    xt = (1 - tc) * x0 + tc * x1 + tc * (1 - tc) * psi
    if eps is not None and sigma_flow:
        xt = xt + sigma_flow * as_tensor(eps)
    vt = (x1 - x0) + (1 - 2 * tc) * psi + tc * (1 - tc) * dpsi
    return xt, vt


def path_velocity(model: GeodesicModel, x0, x1, t) -> Tensor:
    return path_and_velocity(model, x0, x1, t)[1]


def geodesic_loss(model: GeodesicModel, metric: MetricField, x0, x1, sigma_flow: float = 0.1, seed=0,
                  t=None, eps=None) -> Tensor:
    """Monte Carlo mean of G(x_t) * ||dx_t/dt||^2 with t ~ U[0,1] and x_t noised."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    B = x0.shape[0]
    if t is None:
        t = torch.rand(B, 1, generator=gen, dtype=DTYPE)
    if eps is None:
        eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)
    xt, vt = path_and_velocity(model, x0, x1, t, eps, sigma_flow)
    return (metric(xt) * (vt ** 2).sum(-1)).mean()


PairSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


def product_sampler(a, b=None) -> PairSampler:
    """Independent draws x0 ~ Unif(a), x1 ~ Unif(b) (b defaults to a)."""
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)

    def sample(rng: np.random.Generator, n: int):
        return a[rng.integers(len(a), size=n)], b[rng.integers(len(b), size=n)]

    return sample


def train_geodesic(metric: MetricField, sampler: PairSampler, settings: TrainSettings, dim: int, *,
                   hidden_dim=512, n_layers=4, n_freq=32, sigma_flow: float = 0.1, seed: int = 0,
                   model: GeodesicModel | None = None) -> tuple[GeodesicModel, OptState, list[float]]:
    """Minimise path energy under a frozen metric; returns the live model, optimiser and trace."""
    model = model or make_geodesic_model(dim, hidden_dim=hidden_dim, n_layers=n_layers, n_freq=n_freq, seed=seed)
    opt = make_opt(model.net, settings.lr, settings.grad_clip, settings.ema_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)

    def loss_fn(step: int) -> Tensor:
        x0, x1 = sampler(rng, settings.batch_size)
        return geodesic_loss(model, metric, x0, x1, sigma_flow, gen)

    trace = fit(model.net, opt, loss_fn, settings.steps, "geodesic")
    return model, opt, trace


def line_integral(metric: MetricField, path: Callable[[Tensor], tuple[Tensor, Tensor]], n_t: int = 200,
                  power: float = 1.0) -> np.ndarray:
    """Per-pair integral over t of G(x_t)^power * ||dx_t/dt|| by the midpoint rule.

    ``path(t)`` returns (x_t, dx_t/dt) for a batch of pairs at scalar time t.
    """
    total = None
    for i in range(n_t):
        t = (i + 0.5) / n_t
        xt, vt = path(torch.tensor(t, dtype=DTYPE))
        with torch.no_grad():
            g = metric(xt.detach()) ** power
            term = (g * vt.detach().norm(dim=-1)).numpy() / n_t
        total = term if total is None else total + term
    return total
