"""Run configuration: every hyperparameter with its default, presets, validation and JSON round-trip."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RunConfig:
    # base synthetic configuration
    learning_rate: float = 1e-4
    hidden_dim: int = 512
    n_layers: int = 4
    grad_clip: float = 10.0
    score_batch_size: int = 4196
    geodesic_batch_size: int = 256          # also used for embedding and flow
    n_freq: int = 32
    ema_decay: float = 0.999
    annealing_steps: int = 2
    metric_scale: float = 10.0              # lambda
    n_noise_scales: int = 20
    sigma_min: float = 0.01
    sigma_max: float = 0.2
    metric_constant: float = 0.2            # gamma
    weight_beta: float = 0.3                # beta_w
    energy_clip_quantiles: tuple[float, float] = (0.05, 0.98)
    metric_clip_lower_quantile: float = 0.05
    sigma_flow: float = 0.1
    leiden_n_neighbors: int = 10
    leiden_resolution: float = 0.3
    # per-dataset schedule (epoch = one pass over the training points)
    temperature_min: float = 1.0
    temperature_max: float = 1.0
    score_epochs: int = 500
    energy_epochs: int = 3000
    geodesic_epochs: int = 2000
    embedding_epochs: int = 2000
    flow_epochs: int = 2000
    score_n_layers: int | None = None       # score/energy depth override (EB uses 5)
    # data
    dataset: str | None = None              # CSV or binary file; None with dataset_kind='sphere' generates one
    dataset_kind: str = "points"            # points | sphere | timepoints
    sphere_dim: int = 10
    sphere_n: int = 40000
    pca_components: int | None = None
    holdout: tuple[int, ...] = ()
    # clustering / refinement
    cluster_method: str = "kmeans"          # kmeans | graph
    n_clusters: int = 1
    anneal_alpha: float = 1.0
    distill_norm: str = "l1"
    distill_ratio: str = "consistent"
    # metric / geometry / transport
    metric: str = "energy"                  # energy | identity (CFM baseline)
    metric_floor_mode: str = "metric"
    geodesic_sigma_flow: float | None = None  # defaults to sigma_flow
    geodesic_coupling: str = "product"      # pairs used to train geodesic and embedding
    coupling: str = "ot"                    # flow coupling: ot | product
    ot_solver: str = "exact"
    ot_cost_power: float = 2.0
    ot_reg: float = 0.05
    embedding_loss_form: str = "squared"
    embedding_dim: int | None = None
    # evaluation
    integrate_steps: int = 100
    integrate_method: str = "rk4"
    eval_max_n: int = 1024
    ave_pairs: int = 2000
    ave_t: int = 16
    # run
    seed: int = 0
    output_dir: str = "runs/default"

    # ------------------------------------------------------------------ helpers
    @property
    def score_layers(self) -> int:
        return self.score_n_layers or self.n_layers

    @property
    def geo_sigma(self) -> float:
        return self.sigma_flow if self.geodesic_sigma_flow is None else self.geodesic_sigma_flow

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        raw = dict(raw)
        preset = raw.pop("preset", None)
        base = PRESETS[preset] if preset else {}
        if preset and preset not in PRESETS:
            raise ConfigError([f"unknown preset {preset!r}"])
        known = {f.name for f in fields(cls)}
        problems = [f"unknown key {k!r}" for k in sorted(set(raw) - known)]
        merged = {k: v for k, v in {**base, **raw}.items() if k in known}
        for k in ("energy_clip_quantiles", "holdout"):
            if k in merged and isinstance(merged[k], list):
                merged[k] = tuple(merged[k])
        cfg = cls(**merged)
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
        except TypeError as exc:
            problems.append(f"ill-typed value: {exc}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a JSON object"])
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def override(self, **kw) -> "RunConfig":
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        p: list[str] = []

        def positive(name, integer=False):
            v = getattr(self, name)
            if integer and (not isinstance(v, int) or isinstance(v, bool)):
                p.append(f"{name} must be an integer")
            elif not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
                p.append(f"{name} must be positive (got {v!r})")

        for name in ("learning_rate", "sigma_min", "sigma_max", "ema_decay", "temperature_min", "temperature_max",
                     "ot_reg"):
            positive(name)
        for name in ("hidden_dim", "n_layers", "score_batch_size", "geodesic_batch_size", "n_freq",
                     "annealing_steps", "n_noise_scales", "leiden_n_neighbors", "n_clusters", "integrate_steps",
                     "eval_max_n", "ave_pairs", "ave_t", "sphere_dim", "sphere_n"):
            positive(name, integer=True)
        for name in ("score_epochs", "energy_epochs", "geodesic_epochs", "embedding_epochs", "flow_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                p.append(f"{name} must be a nonnegative integer")
        if self.n_layers < 2 or (self.score_n_layers is not None and self.score_n_layers < 3):
            p.append("n_layers must be >= 2 (score/energy nets need >= 3 for residual blocks)")
        if isinstance(self.sigma_min, (int, float)) and isinstance(self.sigma_max, (int, float)):
            if self.n_noise_scales > 1 and not self.sigma_min < self.sigma_max:
                p.append("sigma_min must be < sigma_max")
        q = self.energy_clip_quantiles
        if len(q) != 2 or not 0.0 <= q[0] < q[1] <= 1.0:
            p.append(f"energy_clip_quantiles must satisfy 0 <= lo < hi <= 1 (got {list(q)})")
        if not 0.0 <= self.metric_clip_lower_quantile <= 1.0:
            p.append("metric_clip_lower_quantile must lie in [0, 1]")
        if not 0.0 < self.ema_decay < 1.0:
            p.append("ema_decay must lie in (0, 1)")
        if not 0.0 <= self.anneal_alpha <= 1.0:
            p.append("anneal_alpha must lie in [0, 1]")
        if self.grad_clip < 0:
            p.append("grad_clip must be nonnegative")
        for name in ("metric_scale", "metric_constant", "weight_beta", "sigma_flow", "leiden_resolution"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be nonnegative")
        if self.metric == "energy" and self.metric_constant <= 0:
            p.append("metric_constant (gamma) must be positive so that G >= gamma > 0")
        if self.geodesic_sigma_flow is not None and self.geodesic_sigma_flow < 0:
            p.append("geodesic_sigma_flow must be nonnegative")
        if self.pca_components is not None and self.pca_components < 1:
            p.append("pca_components must be >= 1")
        choices = {
            "dataset_kind": ("points", "sphere", "timepoints"),
            "cluster_method": ("kmeans", "graph"),
            "distill_norm": ("l1", "l2"),
            "distill_ratio": ("consistent", "printed"),
            "metric": ("energy", "identity"),
            "metric_floor_mode": ("metric", "energy"),
            "geodesic_coupling": ("product", "ot"),
            "coupling": ("ot", "product"),
            "ot_solver": ("exact", "sinkhorn"),
            "embedding_loss_form": ("squared", "abs"),
            "integrate_method": ("euler", "rk4"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                p.append(f"{name} must be one of {list(allowed)} (got {getattr(self, name)!r})")
        if self.dataset_kind == "timepoints" and self.dataset is None:
            p.append("dataset_kind 'timepoints' needs a dataset path")
        if p:
            raise ConfigError(p)


PRESETS: dict[str, dict[str, Any]] = {
    "synthetic": {},
    "eb": {
        "score_epochs": 500, "energy_epochs": 3000, "embedding_epochs": 2000, "flow_epochs": 2000,
        "score_n_layers": 5, "n_layers": 5, "annealing_steps": 3, "metric_scale": 4.0,
        "temperature_min": 5.0, "temperature_max": 10.0, "sigma_min": 0.1, "sigma_max": 0.2,
        "sigma_flow": 0.05, "leiden_resolution": 0.0, "cluster_method": "graph",
        "dataset": "data/eb.csv", "dataset_kind": "timepoints", "pca_components": 5, "holdout": (2, 3, 4),
    },
    "cite": {
        "score_epochs": 500, "energy_epochs": 3000, "embedding_epochs": 500, "flow_epochs": 2000,
        "n_layers": 4, "annealing_steps": 2, "metric_scale": 1.0, "temperature_min": 1.0,
        "temperature_max": 1.0, "sigma_min": 0.02, "sigma_max": 0.3, "sigma_flow": 0.2,
        "energy_clip_quantiles": (0.05, 0.95), "metric_clip_lower_quantile": 0.05, "metric_constant": 0.5,
        "weight_beta": 0.2, "cluster_method": "graph", "dataset": "data/cite.csv", "dataset_kind": "timepoints",
        "pca_components": 5, "holdout": (3, 4),
    },
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}"])
    return RunConfig.from_dict({**PRESETS[name], **overrides})
