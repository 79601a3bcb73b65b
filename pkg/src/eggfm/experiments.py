"""Desk-scale versions of the synthetic experiments (sphere AVE, barbell, arc W1).

Each runner writes a normal run directory through the staged pipeline and
returns a plain dict of results, so the scripts/ CLIs and the acceptance
tests share one code path.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import sample_arc, sample_barbell, save_dataset
from .geometry import GeodesicModel, line_integral, path_and_velocity
from .pipeline import Run, evaluate_ave, evaluate_w1, run_dir, run_stage

# shared desk-scale overrides: smaller nets and step counts than the paper tables;
# with ~1e3 steps a 0.999 shadow would still carry a third of the init weights
DESK = {"hidden_dim": 128, "n_freq": 16, "learning_rate": 1e-3, "ema_decay": 0.99}


def _run(cfg: RunConfig, stages) -> Run:
    run = Run(cfg)
    for s in stages:
        run_stage(run, s)
    return run


# --------------------------------------------------------------------------- sphere

def sphere_config(dim: int = 10, n: int = 8000, out: str | Path = "runs/sphere10", seed: int = 0, **kw) -> RunConfig:
    base = {
        **DESK, "dataset_kind": "sphere", "sphere_dim": dim, "sphere_n": n, "seed": seed, "output_dir": str(out),
        "score_batch_size": 512, "geodesic_batch_size": 256,
        "score_epochs": 125, "energy_epochs": 125, "geodesic_epochs": 64,
        "ave_pairs": 2000, "ave_t": 16,
    }
    return RunConfig.from_dict({**base, **kw})


def sphere_ave(cfg: RunConfig) -> dict:
    """Train score -> energy -> refine -> geodesic on a sphere, then AVE of learned path and chord."""
    t0 = time.time()
    run = _run(cfg, ("score", "energy", "refine", "geodesic"))
    learned = evaluate_ave(run, "learned")
    chord = evaluate_ave(run, "chord")
    res = {"dim": cfg.sphere_dim, "n": cfg.sphere_n, "seed": cfg.seed, "ave": learned.value,
           "ave_std": learned.std, "ave_sem": learned.extra["sem"], "chord_ave": chord.value,
           "seconds": time.time() - t0}
    res.update(_radial_probe(run))
    (run.root / "sphere_ave.json").write_text(json.dumps(res, indent=1))
    return res


def _radial_probe(run: Run) -> dict:
    """Median metric at radii 0.5, 1 and 1.5 along random directions, and mean learned-midpoint radius."""
    from .data import sample_sphere
    from .geometry import metric_at, path_point

    metric = run.load_metric()
    u = sample_sphere(run.cfg.sphere_dim, 512, run.cfg.seed + 7).points
    med = {f"metric_r{r}": float(np.median(metric_at(metric, r * u))) for r in (0.5, 1.0, 1.5)}
    v = sample_sphere(run.cfg.sphere_dim, 512, run.cfg.seed + 8).points
    with torch.no_grad():
        mid = path_point(run.load_geodesic(), u, v, 0.5).numpy()
    med["mid_radius_learned"] = float(np.linalg.norm(mid, axis=1).mean())
    med["mid_radius_chord"] = float(np.linalg.norm((u + v) / 2, axis=1).mean())
    return med


# --------------------------------------------------------------------------- barbell

def barbell_config(data_path: str | Path, out: str | Path = "runs/barbell", seed: int = 0, **kw) -> RunConfig:
    base = {
        **DESK, "hidden_dim": 64, "n_freq": 8, "dataset": str(data_path), "dataset_kind": "points",
        "seed": seed, "output_dir": str(out), "sigma_min": 0.05, "sigma_max": 1.0, "n_noise_scales": 10,
        "score_batch_size": 256, "geodesic_batch_size": 256,
        "score_epochs": 150, "energy_epochs": 150, "geodesic_epochs": 150, "metric_scale": 1.0,
    }
    return RunConfig.from_dict({**base, **kw})


def barbell(out: str | Path = "runs/barbell", seed: int = 0, n: int = 2000, n_pairs: int = 200, **kw) -> dict:
    """Fraction of cross-blob pairs whose learned path has a lower G-line-integral than the chord."""
    t0 = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = sample_barbell(n, seed=seed)
    save_dataset(ds, out / "barbell.csv")
    cfg = barbell_config(out / "barbell.csv", out, seed, **kw)
    run = _run(cfg, ("score", "energy", "refine", "geodesic"))
    metric, geo = run.load_metric(), run.load_geodesic()
    rng = np.random.default_rng(seed + 1)
    pts = ds.points
    left, right = pts[pts[:, 0] < -1.0], pts[pts[:, 0] > 1.0]
    x0 = left[rng.integers(len(left), size=n_pairs)]
    x1 = right[rng.integers(len(right), size=n_pairs)]
    learned = line_integral(metric, lambda t: path_and_velocity(geo, x0, x1, t))
    chord = line_integral(metric, lambda t: path_and_velocity(GeodesicModel(None, 2), x0, x1, t))
    res = {"seed": seed, "n_pairs": n_pairs, "frac_lower": float(np.mean(learned < chord)),
           "mean_learned": float(learned.mean()), "mean_chord": float(chord.mean()),
           "seconds": time.time() - t0}
    (out / "barbell.json").write_text(json.dumps(res, indent=1))
    return res


# --------------------------------------------------------------------------- arc

def arc_config(data_path: str | Path, out: str | Path, seed: int = 0, metric: str = "energy", **kw) -> RunConfig:
    base = {
        **DESK, "hidden_dim": 64, "n_freq": 8, "dataset": str(data_path), "dataset_kind": "timepoints",
        "holdout": [1], "metric": metric, "seed": seed, "output_dir": str(out),
        "sigma_min": 0.05, "sigma_max": 1.0, "n_noise_scales": 10, "metric_scale": 1.0,
        "score_batch_size": 256, "geodesic_batch_size": 256,
        "score_epochs": 150, "energy_epochs": 150, "geodesic_epochs": 150, "embedding_epochs": 100,
        "flow_epochs": 150, "integrate_steps": 50,
    }
    return RunConfig.from_dict({**base, **kw})


def arc_w1(out: str | Path = "runs/arc", seed: int = 0, n_per_time: int = 400, arc_kw: dict | None = None,
           **kw) -> dict:
    """Held-out middle-timepoint W1 of the energy-metric pipeline and of the identity-metric baseline."""
    t0 = time.time()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = sample_arc(n_per_time, 3, seed=seed, **(arc_kw or {}))
    save_dataset(ds, out / "arc.csv")
    res = {"seed": seed}
    for name, metric in (("eggfm", "energy"), ("cfm", "identity")):
        run = _run(arc_config(out / "arc.csv", out / name, seed, metric, **kw), ("all",))
        res[f"w1_{name}"] = evaluate_w1(run).value
    res["seconds"] = time.time() - t0
    (out / "arc.json").write_text(json.dumps(res, indent=1))
    return res


# --------------------------------------------------------------------------- leave-one-out on real data

def loo(cfg: RunConfig, holdouts=None, **kw) -> dict:
    """One model per held-out timepoint, each trained without that timepoint; per-holdout W1."""
    cfg = RunConfig.from_dict({**cfg.to_dict(), **kw})
    holdouts = list(cfg.holdout if holdouts is None else holdouts)
    if not holdouts:
        raise ValueError("leave-one-out needs at least one holdout timepoint")
    root = run_dir(cfg)
    res = {"holdouts": holdouts, "per_holdout": {}}
    for h in holdouts:
        sub = RunConfig.from_dict({**cfg.to_dict(), "holdout": [h], "output_dir": str(Path(cfg.output_dir) / f"holdout_{h}")})
        run = _run(sub, ("all",))
        rep = evaluate_w1(run)
        rep.append_csv(root / "w1.csv")
        res["per_holdout"][str(h)] = rep.value
    res["mean_w1"] = float(np.mean(list(res["per_holdout"].values())))
    root.mkdir(parents=True, exist_ok=True)
    (root / "loo.json").write_text(json.dumps(res, indent=1))
    return res
