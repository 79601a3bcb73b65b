"""Tempered denoising score matching and energy distillation.

The score net predicts noise: for y = x + sigma*eps it regresses eps_hat(y, sigma)
onto eps/beta, and the score is recovered as -eps_hat/sigma. The energy net
uses an inner-product head E(y) = <E_net(y, sigma), y>, trained so that
grad_y E matches the negated (frozen, EMA) score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .data import Dataset, weighted_minibatch
from .nn import (
    DTYPE, MLP, ModelSpec, OptState, SinusoidalEmbedding, as_tensor, ema_copy, fit, freeze,
    input_grad, make_opt,
)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 0.2
    n_scales: int = 20
    spacing: str = "log"

    def __post_init__(self):
        if not 0 < self.sigma_min:
            raise ValueError("sigma_min must be positive")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.n_scales > 1 and not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be < sigma_max")
        if self.spacing not in ("log", "linear"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    @property
    def sigmas(self) -> np.ndarray:
        if self.n_scales == 1:
            return np.array([self.sigma_min])
        if self.spacing == "log":
            return np.geomspace(self.sigma_min, self.sigma_max, self.n_scales)
        return np.linspace(self.sigma_min, self.sigma_max, self.n_scales)


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


class _Conditioned:
    """Shared plumbing: a net conditioned on noise scale (and optionally cluster id)."""

    def __init__(self, net: MLP, schedule: NoiseSchedule, n_clusters: int = 0, n_freq: int = 32):
        self.net = net
        self.schedule = schedule
        self.n_clusters = n_clusters
        self.n_freq = n_freq
        self.noise_emb = SinusoidalEmbedding(n_freq, "noise_scale")
        self.cluster_emb = SinusoidalEmbedding(n_freq, "cluster_id")

    @property
    def dim(self) -> int:
        return self.net.spec.in_dim

    @property
    def stratified(self) -> bool:
        return self.n_clusters > 0

    def _cond(self, sigma: Tensor, cluster) -> list[Tensor]:
        cond = [self.noise_emb(sigma)]
        if self.stratified:
            if cluster is None:
                raise ValueError("cluster-conditioned model needs cluster ids")
            cond.append(self.cluster_emb(as_tensor(cluster)))
        return cond

    def meta(self) -> dict:
        s = self.schedule
        return {"sigma_min": s.sigma_min, "sigma_max": s.sigma_max, "n_scales": s.n_scales,
                "spacing": s.spacing, "n_clusters": self.n_clusters, "n_freq": self.n_freq}

    @classmethod
    def from_meta(cls, net: MLP, meta: dict):
        sched = NoiseSchedule(meta["sigma_min"], meta["sigma_max"], meta["n_scales"], meta["spacing"])
        return cls(net, sched, meta["n_clusters"], meta["n_freq"])


class ScoreModel(_Conditioned):
    def eps(self, y: Tensor, sigma, cluster=None) -> Tensor:
        sigma = as_tensor(sigma).reshape(-1)
        return self.net(y, *self._cond(sigma, cluster))

    def score(self, y: Tensor, sigma, cluster=None) -> Tensor:
        sigma_t = as_tensor(sigma).reshape(-1)
        return score_from_eps(self.eps(y, sigma_t, cluster), sigma_t[:, None] if sigma_t.numel() > 1 else sigma_t)

    def frozen_copy(self, opt: OptState | None = None) -> "ScoreModel":
        net = ema_copy(self.net, opt) if opt is not None else freeze(_clone(self.net))
        return ScoreModel(net, self.schedule, self.n_clusters, self.n_freq)


class EnergyModel(_Conditioned):
    def energy(self, y: Tensor, sigma, cluster=None) -> Tensor:
        sigma = as_tensor(sigma).reshape(-1)
        head = self.net(y, *self._cond(sigma, cluster))
        return (head * y).sum(-1)

    def grad(self, y: Tensor, sigma, cluster=None, create_graph: bool = True) -> tuple[Tensor, Tensor]:
        return input_grad(lambda z: self.energy(z, sigma, cluster), y, create_graph=create_graph)

    def frozen_copy(self, opt: OptState | None = None) -> "EnergyModel":
        net = ema_copy(self.net, opt) if opt is not None else freeze(_clone(self.net))
        return EnergyModel(net, self.schedule, self.n_clusters, self.n_freq)


def _clone(net: MLP) -> MLP:
    twin = MLP(net.spec)
    twin.load_state_dict(net.state_dict())
    return twin


def make_score_model(dim: int, schedule: NoiseSchedule, *, hidden_dim=512, n_layers=4, n_clusters=0,
                     n_freq=32, seed=0) -> ScoreModel:
    cond = 2 * n_freq * (2 if n_clusters else 1)
    spec = ModelSpec("score", dim, dim, hidden_dim, n_layers, residual=n_layers >= 3, cond_dim=cond)
    return ScoreModel(MLP(spec, seed=seed), schedule, n_clusters, n_freq)


def make_energy_model(dim: int, schedule: NoiseSchedule, *, hidden_dim=512, n_layers=4, n_clusters=0,
                      n_freq=32, seed=0) -> EnergyModel:
    cond = 2 * n_freq * (2 if n_clusters else 1)
    spec = ModelSpec("energy", dim, dim, hidden_dim, n_layers, residual=n_layers >= 3, cond_dim=cond)
    return EnergyModel(MLP(spec, seed=seed), schedule, n_clusters, n_freq)


# --------------------------------------------------------------------------- losses

def score_from_eps(eps_pred, sigma):
    if isinstance(eps_pred, Tensor):
        return -eps_pred / as_tensor(sigma)
    return -np.asarray(eps_pred, dtype=np.float64) / np.asarray(sigma, dtype=np.float64)


def _noised(x: Tensor, schedule: NoiseSchedule, gen: torch.Generator, noise: Tensor | None):
    """Every row paired with every sigma: returns y, eps, sigma (all flattened to B*m rows)."""
    sig = torch.as_tensor(schedule.sigmas, dtype=DTYPE)
    B, d = x.shape
    m = len(sig)
    if noise is None:
        noise = torch.randn(B, m, d, generator=gen, dtype=DTYPE)
    y = x[:, None, :] + sig[None, :, None] * noise
    return y.reshape(B * m, d), noise.reshape(B * m, d), sig.repeat(B), m


def _repeat_clusters(clusters, m: int):
    if clusters is None:
        return None
    return torch.as_tensor(np.asarray(clusters)).repeat_interleave(m)


def dsm_loss(score: ScoreModel, x, beta: float = 1.0, seed=0, clusters=None, noise: Tensor | None = None) -> Tensor:
    """Batch mean over x of sum_i ||eps_hat(x + sigma_i eps, sigma_i) - eps/beta||^2."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = as_tensor(x)
    y, eps, sig, m = _noised(x, score.schedule, _generator(seed), noise)
    pred = score.eps(y, sig, _repeat_clusters(clusters, m))
    per = ((pred - eps / beta) ** 2).sum(-1).reshape(-1, m).sum(-1)
    return per.mean()


def energy_match_loss(energy: EnergyModel, score: ScoreModel, x, seed=0, clusters=None,
                      noise: Tensor | None = None) -> Tensor:
    """Batch mean of sum_i ||grad_y E(y, sigma_i) + s(y, sigma_i)||^2 with the score held fixed."""
    x = as_tensor(x)
    y, _, sig, m = _noised(x, energy.schedule, _generator(seed), noise)
    cl = _repeat_clusters(clusters, m)
    with torch.no_grad():
        target = score.score(y, sig, cl)
    _, g = energy.grad(y, sig, cl)
    per = ((g + target) ** 2).sum(-1).reshape(-1, m).sum(-1)
    return per.mean()


def energy_at(energy: EnergyModel, x, sigma: float | None = None, cluster=None, chunk: int = 8192) -> np.ndarray:
    """Energy per row at ``sigma`` (default sigma_min, the level used downstream)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = energy.schedule.sigma_min if sigma is None else sigma
    if cluster is not None and np.ndim(cluster) == 0:
        cluster = np.full(len(x), int(cluster))
    out = []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            xb = as_tensor(x[i:i + chunk])
            sig = torch.full((len(xb),), float(s), dtype=DTYPE)
            cb = None if cluster is None else np.asarray(cluster)[i:i + chunk]
            out.append(energy.energy(xb, sig, cb).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def score_at(score: ScoreModel, x, sigma: float | None = None, cluster=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = score.schedule.sigma_min if sigma is None else sigma
    if cluster is not None and np.ndim(cluster) == 0:
        cluster = np.full(len(x), int(cluster))
    with torch.no_grad():
        sig = torch.full((len(x),), float(s), dtype=DTYPE)
        return score.score(as_tensor(x), sig, cluster).numpy()


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1000
    batch_size: int = 4196
    lr: float = 1e-4
    grad_clip: float = 10.0
    ema_decay: float = 0.999


def train_on_data(
    ds: Dataset,
    model,
    settings: TrainSettings,
    batch_loss: Callable[[Tensor, np.ndarray | None, torch.Generator], Tensor],
    stage: str,
    seed: int = 0,
    opt: OptState | None = None,
) -> tuple[OptState, list[float]]:
    """Weighted-minibatch training loop shared by every data-driven stage."""
    opt = opt or make_opt(model.net, settings.lr, settings.grad_clip, settings.ema_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    clusters = ds.clusters() if getattr(model, "stratified", False) else None

    def loss_fn(step: int) -> Tensor:
        idx = weighted_minibatch(ds, settings.batch_size, rng)
        cb = None if clusters is None else clusters[idx]
        return batch_loss(as_tensor(ds.points[idx]), cb, gen)

    trace = fit(model.net, opt, loss_fn, settings.steps, stage)
    return opt, trace


def train_score(ds: Dataset, score: ScoreModel, settings: TrainSettings, beta: float = 1.0, seed: int = 0,
                stage: str = "score") -> tuple[ScoreModel, OptState, list[float]]:
    """Plain tempered DSM; returns the live model, its optimiser (EMA inside) and the loss trace."""
    opt, trace = train_on_data(
        ds, score, settings, lambda xb, cb, g: dsm_loss(score, xb, beta, g, cb), stage, seed)
    return score, opt, trace


def train_energy(ds: Dataset, energy: EnergyModel, score: ScoreModel, settings: TrainSettings, seed: int = 0,
                 stage: str = "energy") -> tuple[EnergyModel, OptState, list[float]]:
    """Distil an energy from a frozen score (pass the EMA copy)."""
    opt, trace = train_on_data(
        ds, energy, settings, lambda xb, cb, g: energy_match_loss(energy, score, xb, g, cb), stage, seed)
    return energy, opt, trace
