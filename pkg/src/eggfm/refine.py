"""Iterative density refinement.

Each step k trains a score at temperature beta_k (annealed against the frozen
step k-1 score), distils an energy from it, and recomputes self-normalised
importance weights so that the next step samples the data closer to uniform
on the manifold. With J > 1 clusters the score and energy are cluster
conditioned and the weights are normalised per cluster before being
combined so each cluster carries total mass 1/J.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .data import Dataset
from .nn import OptState, as_tensor
from .score import (
    EnergyModel, NoiseSchedule, ScoreModel, TrainSettings, _generator, _noised, _repeat_clusters,
    energy_at, make_energy_model, make_score_model, train_energy, train_on_data, train_score,
)


class EmptyClusterError(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    n_steps: int = 2                      # K
    weight_beta: float = 0.3              # beta_w
    alpha: float = 1.0
    temperature_min: float = 1.0
    temperature_max: float = 1.0
    clip_quantiles: tuple[float, float] = (0.05, 0.98)
    distill_norm: str = "l1"              # "l1" as printed, or "l2"
    distill_ratio: str = "consistent"     # beta_{k-1}/beta_k; "printed" uses beta_k/beta_{k-1}

    def __post_init__(self):
        q_lo, q_hi = self.clip_quantiles
        if self.n_steps < 1:
            raise ValueError("n_steps (K) must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= q_lo < q_hi <= 1.0:
            raise ValueError("clip quantiles must satisfy 0 <= lo < hi <= 1")
        if self.temperature_min <= 0 or self.temperature_max <= 0:
            raise ValueError("temperatures must be positive")
        if self.distill_norm not in ("l1", "l2"):
            raise ValueError("distill_norm must be 'l1' or 'l2'")
        if self.distill_ratio not in ("consistent", "printed"):
            raise ValueError("distill_ratio must be 'consistent' or 'printed'")

    def temperatures(self) -> np.ndarray:
        """beta_1..beta_K, linear from temperature_min to temperature_max."""
        if self.n_steps == 1:
            return np.array([self.temperature_min])
        return np.linspace(self.temperature_min, self.temperature_max, self.n_steps)


# --------------------------------------------------------------------------- SNIS

@dataclass(frozen=True)
class SnisWeights:
    weights: np.ndarray        # sums to 1
    clusters: np.ndarray
    n_clusters: int
    log_norms: np.ndarray      # log R_j, sum of exp(beta_w clip(E)) within cluster j
    clip_bounds: np.ndarray    # J x 2 energy window used for clipping

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def cluster_mass(self) -> np.ndarray:
        return np.bincount(self.clusters, weights=self.weights, minlength=self.n_clusters)


def snis_from_energies(energies, clusters=None, weight_beta: float = 0.3,
                       clip_quantiles=(0.05, 0.98), base_weights=None) -> SnisWeights:
    """Weights w_i proportional to base_i * exp(beta_w * clip(E_i)), each cluster carrying mass 1/J.

    Clipping is to the [q_lo, q_hi] empirical quantile window of each cluster's
    energies.
    """
    e = np.asarray(energies, dtype=np.float64)
    n = len(e)
    if not np.isfinite(e).all():
        raise FloatingPointError("energies must be finite")
    cl = np.zeros(n, dtype=np.int64) if clusters is None else np.asarray(clusters, dtype=np.int64)
    J = int(cl.max()) + 1 if n else 0
    base = np.ones(n) if base_weights is None else np.asarray(base_weights, dtype=np.float64)
    w = np.empty(n)
    log_norms = np.empty(J)
    bounds = np.empty((J, 2))
    q_lo, q_hi = clip_quantiles
    for j in range(J):
        idx = np.flatnonzero(cl == j)
        if len(idx) == 0:
            raise EmptyClusterError(f"cluster {j} has no points")
        ej = e[idx]
        lo, hi = np.quantile(ej, [q_lo, q_hi])
        bounds[j] = lo, hi
        logr = weight_beta * np.clip(ej, lo, hi)
        top = logr.max()
        r = np.exp(logr - top)
        log_norms[j] = top + np.log(r.sum())
        br = base[idx] * r
        # mean-one within the cluster, then the 1/|C_j| factor
        w[idx] = br / br.mean() / len(idx)
    w /= w.sum()
    return SnisWeights(w, cl, J, log_norms, bounds)


def snis_weights(ds: Dataset, energy: EnergyModel, config: RefineConfig) -> SnisWeights:
    """SNIS weights of the raw data under a trained energy evaluated at sigma_min."""
    cl = ds.clusters()
    e = energy_at(energy, ds.points, cluster=cl if energy.stratified else None)
    return snis_from_energies(e, cl, config.weight_beta, config.clip_quantiles, ds.weight)


def snis_estimate(values, weights, clusters=None, n_clusters: int | None = None) -> float:
    """(1/J) sum_j [sum_{t in j} w_t g_t / sum_{t in j} w_t].

    ``weights`` may be raw importance weights of sampled indices or a
    SnisWeights (then ``clusters`` defaults to its cluster ids).
    """
    if isinstance(weights, SnisWeights):
        clusters = weights.clusters if clusters is None else clusters
        n_clusters = n_clusters or weights.n_clusters
        weights = weights.weights
    g = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    cl = np.zeros(len(g), dtype=np.int64) if clusters is None else np.asarray(clusters, dtype=np.int64)
    J = n_clusters or (int(cl.max()) + 1)
    num = np.bincount(cl, weights=w * g, minlength=J)
    den = np.bincount(cl, weights=w, minlength=J)
    if (den <= 0).any():
        raise EmptyClusterError(f"no weighted samples in cluster(s) {np.flatnonzero(den <= 0).tolist()}")
    return float(np.mean(num / den))


def snis_standard_error(values, weights, clusters=None, n_clusters: int | None = None) -> float:
    """Delta-method standard error of snis_estimate."""
    g = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    cl = np.zeros(len(g), dtype=np.int64) if clusters is None else np.asarray(clusters, dtype=np.int64)
    J = n_clusters or (int(cl.max()) + 1)
    var = 0.0
    for j in range(J):
        m = cl == j
        wj, gj = w[m], g[m]
        mu = (wj * gj).sum() / wj.sum()
        var += (wj ** 2 * (gj - mu) ** 2).sum() / wj.sum() ** 2
    return float(np.sqrt(var) / J)


# --------------------------------------------------------------------------- annealing

def anneal_loss(score: ScoreModel, prev: ScoreModel, x, beta: float, beta_prev: float, alpha: float = 1.0,
                seed=0, clusters=None, norm: str = "l1", ratio: str = "consistent",
                noise: Tensor | None = None) -> Tensor:
    """alpha * DSM at beta + (1 - alpha) * |eps_hat - r * eps_hat_prev| summed over noise scales.

    Both terms are in noise-prediction form; r = beta_prev/beta by default
    (matches the temperature scaling of the DSM target). ``prev`` is frozen.
    """
    if beta <= 0 or beta_prev <= 0:
        raise ValueError("temperatures must be positive")
    x = as_tensor(x)
    y, eps, sig, m = _noised(x, score.schedule, _generator(seed), noise)
    cl = _repeat_clusters(clusters, m)
    pred = score.eps(y, sig, cl)
    per = ((pred - eps / beta) ** 2).sum(-1)
    if alpha < 1.0:
        with torch.no_grad():
            target = prev.eps(y, sig, cl)
        r = beta_prev / beta if ratio == "consistent" else beta / beta_prev
        diff = pred - r * target
        distill = diff.abs().sum(-1) if norm == "l1" else (diff ** 2).sum(-1)
        per = alpha * per + (1.0 - alpha) * distill
    return per.reshape(-1, m).sum(-1).mean()


# --------------------------------------------------------------------------- pipeline

@dataclass
class RefineStep:
    k: int
    beta: float
    score: ScoreModel          # EMA, frozen
    energy: EnergyModel        # EMA, frozen
    weights: SnisWeights       # computed from this step's energy
    sampling_weights: np.ndarray  # weights the step was trained under
    score_opt: OptState
    energy_opt: OptState
    score_trace: list[float] = field(default_factory=list)
    energy_trace: list[float] = field(default_factory=list)


@dataclass
class RefineResult:
    steps: list[RefineStep]

    @property
    def score(self) -> ScoreModel:
        return self.steps[-1].score

    @property
    def energy(self) -> EnergyModel:
        return self.steps[-1].energy

    @property
    def weights(self) -> SnisWeights:
        return self.steps[-1].weights


@dataclass(frozen=True)
class NetArch:
    hidden_dim: int = 512
    n_layers: int = 4
    n_freq: int = 32


def initial_sampling(ds: Dataset) -> np.ndarray:
    """Step-1 sampling weights: raw data weights, each cluster rescaled to mass 1/J."""
    return snis_from_energies(np.zeros(ds.n), ds.clusters(), 0.0, (0.0, 1.0), ds.weight).weights


def build_models(ds: Dataset, schedule: NoiseSchedule, arch: NetArch, seed: int) -> tuple[ScoreModel, EnergyModel]:
    n_cond = ds.n_clusters if ds.n_clusters > 1 else 0
    score = make_score_model(ds.d, schedule, hidden_dim=arch.hidden_dim, n_layers=arch.n_layers,
                             n_clusters=n_cond, n_freq=arch.n_freq, seed=seed)
    energy = make_energy_model(ds.d, schedule, hidden_dim=arch.hidden_dim, n_layers=arch.n_layers,
                               n_clusters=n_cond, n_freq=arch.n_freq, seed=seed + 1)
    return score, energy


def train_step_score(ds: Dataset, k: int, config: RefineConfig, sampling: np.ndarray, score: ScoreModel,
                     settings: TrainSettings, prev: ScoreModel | None = None, seed: int = 0):
    """Score half of refinement step k (plain DSM for k=1, annealing loss afterwards)."""
    betas = config.temperatures()
    beta = float(betas[k - 1])
    data_k = ds.with_weights(sampling)
    sseed = seed + 1000 * k
    if k == 1:
        return train_score(data_k, score, settings, beta, sseed, stage="score[k=1]")
    if prev is None:
        raise ValueError(f"refinement step {k} needs the frozen step-{k - 1} score")
    beta_prev = float(betas[k - 2])

    def loss(xb, cb, g):
        return anneal_loss(score, prev, xb, beta, beta_prev, config.alpha, g, cb,
                           config.distill_norm, config.distill_ratio)

    opt, trace = train_on_data(data_k, score, settings, loss, f"score[k={k}]", sseed)
    return score, opt, trace


def train_step_energy(ds: Dataset, k: int, sampling: np.ndarray, energy: EnergyModel, frozen_score: ScoreModel,
                      settings: TrainSettings, seed: int = 0):
    data_k = ds.with_weights(sampling)
    return train_energy(data_k, energy, frozen_score, settings, seed + 1000 * k + 1, stage=f"energy[k={k}]")


def refine_pipeline(
    ds: Dataset,
    config: RefineConfig,
    schedule: NoiseSchedule,
    score_settings: TrainSettings,
    energy_settings: TrainSettings,
    arch: NetArch = NetArch(),
    seed: int = 0,
    on_step: Callable[[RefineStep], None] | None = None,
) -> RefineResult:
    """K rounds of score -> energy -> SNIS weights, reweighting the sampling each round.

    Networks are warm-started from the previous round. Weights are always
    recomputed relative to the raw data using the current round's energy.
    """
    betas = config.temperatures()
    sampling = initial_sampling(ds)
    score, energy = build_models(ds, schedule, arch, seed)
    steps: list[RefineStep] = []
    for k in range(1, config.n_steps + 1):
        prev = steps[-1].score if steps else None
        score, s_opt, s_trace = train_step_score(ds, k, config, sampling, score, score_settings, prev, seed)
        frozen_score = score.frozen_copy(s_opt)
        energy, e_opt, e_trace = train_step_energy(ds, k, sampling, energy, frozen_score, energy_settings, seed)
        frozen_energy = energy.frozen_copy(e_opt)
        w = snis_weights(ds, frozen_energy, config)
        step = RefineStep(k, float(betas[k - 1]), frozen_score, frozen_energy, w, sampling,
                          s_opt, e_opt, s_trace, e_trace)
        steps.append(step)
        if on_step is not None:
            on_step(step)
        sampling = w.weights
    return RefineResult(steps)
