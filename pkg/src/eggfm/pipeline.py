"""Staged training driven by a RunConfig; every stage reads and writes artifacts in the run directory.

score -> energy -> refine -> geodesic -> embedding -> flow. Stage k of the
refinement reuses the files of stage k-1, so any stage can be re-run alone
once its prerequisites exist.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blob
from .config import ConfigError, RunConfig
from .data import Dataset, DataError, fit_clusters, load_dataset, pca_whiten, sample_sphere, save_dataset, split_timepoints
from .geometry import (
    GeodesicModel, MetricField, fit_metric, product_sampler, train_geodesic,
)
from .nn import config_hash, ema_copy, load_checkpoint, save_checkpoint
from .refine import (
    NetArch, RefineConfig, build_models, initial_sampling, snis_weights, train_step_energy, train_step_score,
)
from .score import EnergyModel, NoiseSchedule, ScoreModel, TrainSettings
from .eval import (
    EvalReport, PlaneSpec, average_geodesic_error, chord_path, export_energy_grid, learned_path,
    leave_one_out_eval, sphere_geodesic,
)
from .transport import (
    EmbeddingModel, FlowModel, TimeSchedule, coupled_batch_sampler, identity_embedding, integrate,
    multi_timepoint_schedule, train_embedding, train_flow, write_trajectory_csv,
)

log = logging.getLogger("eggfm")

STAGES = ("score", "energy", "refine", "geodesic", "embedding", "flow")
OUTPUT_ROOT_ENV = "EGGFM_OUTPUT_ROOT"


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, path: Path | None = None):
        self.stage = stage
        self.path = path
        super().__init__(f"requires: {stage}")


def run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# --------------------------------------------------------------------------- data

@dataclass
class Prepared:
    full: Dataset          # every row, after the optional PCA projection
    train: Dataset         # held-out timepoints removed, cluster labels attached
    schedule: TimeSchedule | None


def prepare_data(cfg: RunConfig, root: Path | None = None) -> Prepared:
    if cfg.dataset is None:
        if cfg.dataset_kind != "sphere":
            raise DataError("no dataset given (set 'dataset' or use dataset_kind 'sphere')")
        ds = split_timepoints(sample_sphere(cfg.sphere_dim, cfg.sphere_n, cfg.seed), 2, cfg.seed)
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)
            save_dataset(ds, root / "data.bin")
    else:
        ds = load_dataset(cfg.dataset, require_time=cfg.dataset_kind == "timepoints")
    if cfg.pca_components is not None:
        _, z = pca_whiten(ds.points, cfg.pca_components)
        ds = Dataset(z, ds.timepoint, ds.cluster_id, ds.weight)
    schedule = None
    train = ds
    if ds.timepoint is not None and len(ds.timepoints()) >= 2:
        schedule = multi_timepoint_schedule(ds.timepoints(), cfg.holdout)
        if cfg.holdout:
            train = ds.subset(~np.isin(ds.timepoint, list(cfg.holdout)))
    elif cfg.holdout:
        raise DataError("holdout timepoints given but the dataset has no timepoint column")
    if cfg.cluster_method == "graph" or cfg.n_clusters > 1:
        cm = fit_clusters(train, cfg.cluster_method, cfg.n_clusters, n_neighbors=cfg.leiden_n_neighbors,
                          resolution=cfg.leiden_resolution, seed=cfg.seed)
        train = train.with_clusters(cm.labels)
    return Prepared(ds, train, schedule)


# --------------------------------------------------------------------------- run state

class Run:
    """A run directory plus its effective config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = run_dir(cfg)
        # where a run is written does not change what it computes
        self.hash = config_hash({k: v for k, v in cfg.to_dict().items() if k != "output_dir"})
        self._data: Prepared | None = None

    # paths -------------------------------------------------------------
    def path(self, name: str) -> Path:
        return self.root / name

    def ckpt(self, name: str) -> Path:
        return self.path(f"{name}.ckpt")

    @property
    def data(self) -> Prepared:
        if self._data is None:
            self._data = prepare_data(self.cfg, self.root)
        return self._data

    @property
    def identity(self) -> bool:
        return self.cfg.metric == "identity"

    def write_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(self.cfg.to_json() + "\n")

    def require(self, stage: str, name: str) -> Path:
        p = self.ckpt(name) if not name.endswith((".bin", ".json")) else self.path(name)
        if not p.exists():
            raise MissingPrerequisite(stage, p)
        return p

    # settings ----------------------------------------------------------
    def _steps(self, epochs: int, batch: int) -> int:
        return epochs * max(1, math.ceil(self.data.train.n / batch))

    def settings(self, stage: str) -> TrainSettings:
        c = self.cfg
        batch = c.score_batch_size if stage in ("score", "energy") else c.geodesic_batch_size
        epochs = {"score": c.score_epochs, "energy": c.energy_epochs, "geodesic": c.geodesic_epochs,
                  "embedding": c.embedding_epochs, "flow": c.flow_epochs}[stage]
        return TrainSettings(self._steps(epochs, batch), batch, c.learning_rate, c.grad_clip, c.ema_decay)

    def refine_config(self) -> RefineConfig:
        c = self.cfg
        return RefineConfig(c.annealing_steps, c.weight_beta, c.anneal_alpha, c.temperature_min, c.temperature_max,
                            tuple(c.energy_clip_quantiles), c.distill_norm, c.distill_ratio)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.cfg.sigma_min, self.cfg.sigma_max, self.cfg.n_noise_scales)

    def arch(self) -> NetArch:
        return NetArch(self.cfg.hidden_dim, self.cfg.score_layers, self.cfg.n_freq)

    # artifacts ---------------------------------------------------------
    def save_model(self, name: str, net, opt, meta: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.ckpt(name).write_bytes(save_checkpoint(net, opt, seed=self.cfg.seed, config_hash=self.hash, meta=meta))

    def load_net(self, stage: str, name: str, role: str | None = None):
        ck = load_checkpoint(self.require(stage, name).read_bytes())
        if role is not None and ck.model.spec.role != role:
            raise MissingPrerequisite(stage, self.ckpt(name))
        return ck

    def save_trace(self, name: str, trace: list[float]) -> None:
        self.path(f"losses_{name}.json").write_text(json.dumps(trace))

    def save_weights(self, k: int, w) -> None:
        beta = float(self.refine_config().temperatures()[k - 1])
        blob.save(self.path(f"weights_k{k}.bin"), "weights",
                  {"k": k, "beta": beta, "ess": w.ess, "n_clusters": w.n_clusters,
                   "clip_bounds": np.asarray(w.clip_bounds).tolist()}, {"weights": w.weights})

    def load_weights(self, k: int) -> np.ndarray:
        _, arrays = blob.load(self.require("energy" if k == 1 else "refine", f"weights_k{k}.bin"), kind="weights")
        return arrays["weights"]

    def load_score(self, k: int) -> tuple[ScoreModel, ScoreModel]:
        """(live, frozen EMA) score of refinement step k."""
        ck = self.load_net("score" if k == 1 else "refine", f"score_k{k}", "score")
        live = ScoreModel.from_meta(ck.model, ck.meta)
        return live, ScoreModel.from_meta(ema_copy(ck.model, ck.opt), ck.meta)

    def load_energy(self, k: int) -> tuple[EnergyModel, EnergyModel]:
        ck = self.load_net("energy" if k == 1 else "refine", f"energy_k{k}", "energy")
        live = EnergyModel.from_meta(ck.model, ck.meta)
        return live, EnergyModel.from_meta(ema_copy(ck.model, ck.opt), ck.meta)

    def load_metric(self) -> MetricField:
        if self.identity:
            return MetricField(None, gamma=1.0, lam=0.0)
        header, _ = blob.load(self.require("refine", "metric.bin"), kind="metric")
        _, energy = self.load_energy(int(header["k"]))
        return MetricField.from_sidecar(energy, header)

    def load_geodesic(self) -> GeodesicModel:
        if self.identity:
            return GeodesicModel(None, self.data.full.d, self.cfg.n_freq)
        ck = self.load_net("geodesic", "geodesic", "geodesic")
        return GeodesicModel(ema_copy(ck.model, ck.opt), ck.meta["dim"], ck.meta["n_freq"])

    def load_embedding(self) -> EmbeddingModel:
        if self.identity:
            return identity_embedding(self.data.full.d)
        ck = self.load_net("embedding", "embedding", "embedding")
        return EmbeddingModel(ema_copy(ck.model, ck.opt), ck.meta["dim"])

    def load_flow(self) -> FlowModel:
        ck = self.load_net("flow", "flow", "flow")
        return FlowModel(ema_copy(ck.model, ck.opt), ck.meta["n_freq"])

    # samplers ----------------------------------------------------------
    def _intervals(self):
        ds, sch = self.data.full, self.data.schedule
        return [(ds.at_time(iv.label_start), ds.at_time(iv.label_end), iv.t_start, iv.t_end) for iv in sch.intervals]

    def pair_sampler(self):
        """Endpoint pairs for the geodesic and embedding objectives."""
        if self.data.schedule is None:
            return product_sampler(self.data.train.points)
        ivs = self._intervals()
        per = max(1, math.ceil(self.cfg.geodesic_batch_size / len(ivs)))
        inner = coupled_batch_sampler(ivs, per, "euclidean", self.cfg.geodesic_coupling, self.cfg.ot_cost_power,
                                      self.cfg.ot_solver)

        def sample(rng, n):
            x0, x1, _, _ = inner(rng)
            return x0[:n], x1[:n]

        return sample


# --------------------------------------------------------------------------- stages

def stage_score(run: Run) -> None:
    ds = run.data.train
    score, _ = build_models(ds, run.noise_schedule(), run.arch(), run.cfg.seed)
    score, opt, trace = train_step_score(ds, 1, run.refine_config(), initial_sampling(ds), score,
                                         run.settings("score"), None, run.cfg.seed)
    run.save_model("score_k1", score.net, opt, score.meta())
    run.save_trace("score_k1", trace)


def stage_energy(run: Run) -> None:
    ds = run.data.train
    _, frozen = run.load_score(1)
    _, energy = build_models(ds, run.noise_schedule(), run.arch(), run.cfg.seed)
    energy, opt, trace = train_step_energy(ds, 1, initial_sampling(ds), energy, frozen, run.settings("energy"),
                                           run.cfg.seed)
    run.save_model("energy_k1", energy.net, opt, energy.meta())
    run.save_trace("energy_k1", trace)
    run.save_weights(1, snis_weights(ds, energy.frozen_copy(opt), run.refine_config()))


def stage_refine(run: Run) -> None:
    """Steps k = 2..K (warm-started), then cache the metric of the final energy."""
    ds, rc = run.data.train, run.refine_config()
    run.require("energy", "energy_k1")
    for k in range(2, rc.n_steps + 1):
        score, prev = run.load_score(k - 1)
        sampling = run.load_weights(k - 1)
        score, s_opt, s_trace = train_step_score(ds, k, rc, sampling, score, run.settings("score"), prev,
                                                 run.cfg.seed)
        run.save_model(f"score_k{k}", score.net, s_opt, score.meta())
        run.save_trace(f"score_k{k}", s_trace)
        energy, _ = run.load_energy(k - 1)
        energy, e_opt, e_trace = train_step_energy(ds, k, sampling, energy, score.frozen_copy(s_opt),
                                                   run.settings("energy"), run.cfg.seed)
        run.save_model(f"energy_k{k}", energy.net, e_opt, energy.meta())
        run.save_trace(f"energy_k{k}", e_trace)
        run.save_weights(k, snis_weights(ds, energy.frozen_copy(e_opt), rc))
    _, energy = run.load_energy(rc.n_steps)
    c = run.cfg
    metric = fit_metric(energy, ds.points, gamma=c.metric_constant, lam=c.metric_scale,
                        clip_quantiles=c.energy_clip_quantiles, floor_quantile=c.metric_clip_lower_quantile,
                        floor_mode=c.metric_floor_mode, clusters=ds.clusters())
    blob.save(run.path("metric.bin"), "metric", {**metric.sidecar(), "k": rc.n_steps}, {})


def stage_geodesic(run: Run) -> None:
    c = run.cfg
    metric = run.load_metric()
    model, opt, trace = train_geodesic(metric, run.pair_sampler(), run.settings("geodesic"), run.data.full.d,
                                       hidden_dim=c.hidden_dim, n_layers=c.n_layers, n_freq=c.n_freq,
                                       sigma_flow=c.geo_sigma, seed=c.seed)
    run.save_model("geodesic", model.net, opt, {"dim": model.dim, "n_freq": model.n_freq})
    run.save_trace("geodesic", trace)


def stage_embedding(run: Run) -> None:
    c = run.cfg
    metric = run.load_metric()
    geo = run.load_geodesic()
    f, opt, trace = train_embedding(geo, metric, run.pair_sampler(), run.settings("embedding"), run.data.full.d,
                                    hidden_dim=c.hidden_dim, n_layers=c.n_layers, sigma_flow=c.geo_sigma,
                                    form=c.embedding_loss_form, seed=c.seed)
    run.save_model("embedding", f.net, opt, {"dim": f.dim})
    run.save_trace("embedding", trace)


def stage_flow(run: Run) -> None:
    c = run.cfg
    if run.data.schedule is None:
        raise DataError("flow training needs at least two timepoints")
    geo = run.load_geodesic()
    f = run.load_embedding()
    cost = "euclidean" if run.identity else f
    batches = coupled_batch_sampler(run._intervals(), c.geodesic_batch_size, cost, c.coupling, c.ot_cost_power,
                                    c.ot_solver)
    flow, opt, trace = train_flow(geo, batches, run.settings("flow"), run.data.full.d, hidden_dim=c.hidden_dim,
                                  n_layers=c.n_layers, n_freq=c.n_freq, sigma_flow=c.sigma_flow, seed=c.seed)
    run.save_model("flow", flow.net, opt, {"n_freq": flow.n_freq})
    run.save_trace("flow", trace)


STAGE_FNS = {"score": stage_score, "energy": stage_energy, "refine": stage_refine, "geodesic": stage_geodesic,
             "embedding": stage_embedding, "flow": stage_flow}
ENERGY_STAGES = ("score", "energy", "refine", "geodesic", "embedding")


def run_stage(run: Run, stage: str) -> list[str]:
    """Run one stage (or 'all'); returns the stages actually executed."""
    if stage != "all" and stage not in STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}")
    todo = list(STAGES) if stage == "all" else [stage]
    run.write_config()
    done = []
    for s in todo:
        if run.identity and s in ENERGY_STAGES:
            log.info("stage %s skipped (metric=identity)", s)
            continue
        log.info("stage %s", s)
        STAGE_FNS[s](run)
        done.append(s)
    return done


# --------------------------------------------------------------------------- evaluation and exports

def evaluate_ave(run: Run, path: str = "learned", seed: int | None = None) -> EvalReport:
    """Average geodesic error against great circles, pairs drawn from the run's points."""
    pts = run.data.full.points
    norms = np.linalg.norm(pts, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise DataError("AVE needs points on the unit sphere")
    if path == "learned":
        curve = learned_path(run.load_geodesic())
    elif path == "chord":
        curve = chord_path
    elif path == "slerp":
        curve = sphere_geodesic
    else:
        raise ValueError(f"unknown path {path!r}")
    rep = average_geodesic_error(curve, sphere_geodesic, pts, n_pairs=run.cfg.ave_pairs, n_t=run.cfg.ave_t,
                                 seed=run.cfg.seed if seed is None else seed)
    rep.config_hash = run.hash
    rep.extra["path"] = path
    return rep


def evaluate_w1(run: Run, seed: int | None = None) -> EvalReport:
    sch = run.data.schedule
    if sch is None or not sch.targets:
        raise ConfigError(["W1 evaluation needs held-out timepoints (set 'holdout')"])
    rep = leave_one_out_eval(run.load_flow(), run.data.full, sch, n_steps=run.cfg.integrate_steps,
                             method=run.cfg.integrate_method, max_n=run.cfg.eval_max_n,
                             seed=run.cfg.seed if seed is None else seed)
    rep.config_hash = run.hash
    return rep


def export_grid(run: Run, out: Path, i: int = 0, j: int = 1, resolution: int = 64, extent: float = 1.5,
                svg: bool = False):
    d = run.data.full.d
    if not (0 <= i < d and 0 <= j < d and i != j):
        raise ValueError(f"plane axes must be two distinct indices below {d}")
    metric = run.load_metric()
    if metric.energy is None:
        raise MissingPrerequisite("refine")
    plane = PlaneSpec.coordinates(d, i, j, u_range=(-extent, extent), v_range=(-extent, extent))
    grid = export_energy_grid(metric, plane, resolution)
    grid.write_csv(out)
    if svg:
        grid.write_svg(Path(out).with_suffix(".svg"), "metric")
    return grid


def interpolate(run: Run, out: Path, label_from: int, label_to: int, n_steps: int = 100,
                n_traj: int = 64) -> np.ndarray:
    """Integrate the flow from the marginal at ``label_from`` to the time of ``label_to``."""
    sch = run.data.schedule
    if sch is None:
        raise DataError("interpolation needs timepoint labels")
    labels = run.data.full.timepoints()
    for lab in (label_from, label_to):
        if lab not in labels:
            raise DataError(f"timepoint {lab} not in dataset (have {labels})")
    flow = run.load_flow()
    x0 = run.data.full.at_time(label_from)
    rng = np.random.default_rng(run.cfg.seed)
    if len(x0) > n_traj:
        x0 = x0[np.sort(rng.choice(len(x0), size=n_traj, replace=False))]
    span = (sch.t_of(label_from), sch.t_of(label_to))
    traj = integrate(flow, x0, span, n_steps, run.cfg.integrate_method)
    write_trajectory_csv(out, traj, span)
    return traj
