"""Average geodesic error on spheres, exact empirical W1, energy grids and the leave-one-timepoint-out protocol."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .data import Dataset
from .geometry import GeodesicModel, MetricField, path_point
from .nn import DTYPE, as_tensor
from .score import EnergyModel, energy_at
from .transport import TimeSchedule, assignment, cost_matrix, integrate


@dataclass
class EvalReport:
    metric: str
    value: float
    std: float = 0.0
    n: int = 0
    seeds: list[int] = field(default_factory=list)
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"{self.metric} evaluated to {self.value}")
        if self.std < 0:
            raise ValueError("dispersion must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)

    def append_csv(self, path) -> None:
        new = not os.path.exists(path)
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["metric", "value", "std", "n", "seeds", "config_hash", "extra"])
            w.writerow([self.metric, repr(self.value), repr(self.std), self.n,
                        " ".join(map(str, self.seeds)), self.config_hash or "",
                        json.dumps(self.extra, sort_keys=True, default=float)])


def combine_reports(reports: list[EvalReport], metric: str | None = None) -> EvalReport:
    """Mean over per-seed reports; std is the spread across seeds."""
    vals = np.array([r.value for r in reports])
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(metric or reports[0].metric, float(vals.mean()), float(vals.std()),
                      int(sum(r.n for r in reports)), seeds, reports[0].config_hash,
                      {"per_seed": vals.tolist(),
                       "within_std": [r.std for r in reports]})


# --------------------------------------------------------------------------- spheres

def sphere_geodesic(x0, x1, t) -> np.ndarray:
    """Great-circle interpolation between unit vectors (row-wise); t broadcasts."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    cos = np.clip((x0 * x1).sum(-1, keepdims=True), -1.0, 1.0)
    omega = np.arccos(cos)
    if np.any(np.isclose(omega, np.pi, atol=1e-12, rtol=0)):
        raise ValueError("antipodal endpoints: the great-circle geodesic is not unique")
    so = np.sin(omega)
    small = so < 1e-12
    so_safe = np.where(small, 1.0, so)
    a = np.where(small, 1 - t, np.sin((1 - t) * omega) / so_safe)
    b = np.where(small, t, np.sin(t * omega) / so_safe)
    out = a * x0 + b * x1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def chord_path(x0, x1, t) -> np.ndarray:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (1 - t) * x0 + t * x1


def learned_path(model: GeodesicModel) -> Callable:
    """gamma(x0, x1, t) of a trained interpolant, noise-free."""

    def gamma(x0, x1, t):
        with torch.no_grad():
            return path_point(model, x0, x1, as_tensor(t).reshape(-1)).numpy()

    return gamma


def average_geodesic_error(learned: Callable, analytic: Callable = sphere_geodesic, points=None, *,
                           sampler: Callable | None = None, n_pairs: int = 1000, n_t: int = 16,
                           seed: int = 0) -> EvalReport:
    """E over pairs (x0, x1) ~ mu x mu and t ~ U(0,1) of ||gamma - gamma*||^2.

    Pairs are drawn from ``points`` (uniform with replacement) or ``sampler(rng, n)``.
    ``std`` is the spread of per-pair means.
    """
    rng = np.random.default_rng(seed)
    if sampler is not None:
        x0, x1 = sampler(rng, n_pairs)
    else:
        pts = np.asarray(points, dtype=np.float64)
        x0 = pts[rng.integers(len(pts), size=n_pairs)]
        x1 = pts[rng.integers(len(pts), size=n_pairs)]
    t = rng.uniform(0.0, 1.0, size=(n_pairs, n_t))
    X0 = np.repeat(x0, n_t, axis=0)
    X1 = np.repeat(x1, n_t, axis=0)
    T = t.reshape(-1)
    err = ((np.asarray(learned(X0, X1, T)) - np.asarray(analytic(X0, X1, T))) ** 2).sum(-1)
    per_pair = err.reshape(n_pairs, n_t).mean(1)
    return EvalReport("ave", float(per_pair.mean()), float(per_pair.std()), n_pairs, [seed],
                      extra={"n_t": n_t, "sem": float(per_pair.std() / np.sqrt(n_pairs))})


# --------------------------------------------------------------------------- W1

def wasserstein1(a, b, max_n: int = 1024, seed: int = 0) -> float:
    """Exact W1 between uniform empirical measures on equal-size subsamples (Euclidean ground cost)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point clouds must be nonempty")
    rng = np.random.default_rng(seed)
    n = min(len(a), len(b), max_n)
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), size=n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), size=n, replace=False))]
    c = cost_matrix(a, b, "euclidean")
    rows, cols = assignment(c)
    return float(c[rows, cols].mean())


# --------------------------------------------------------------------------- grids

@dataclass(frozen=True)
class PlaneSpec:
    """origin + u*dir_u + v*dir_v for u, v in the given ranges."""

    origin: tuple[float, ...]
    dir_u: tuple[float, ...]
    dir_v: tuple[float, ...]
    u_range: tuple[float, float] = (-1.5, 1.5)
    v_range: tuple[float, float] = (-1.5, 1.5)

    @classmethod
    def coordinates(cls, dim: int, i: int = 0, j: int = 1, fixed=None, u_range=(-1.5, 1.5), v_range=(-1.5, 1.5)):
        """Plane spanned by ambient axes i and j; other coordinates held at ``fixed`` (default 0)."""
        origin = np.zeros(dim) if fixed is None else np.asarray(fixed, dtype=np.float64).copy()
        origin[[i, j]] = 0.0
        eu, ev = np.zeros(dim), np.zeros(dim)
        eu[i] = ev[j] = 1.0
        return cls(tuple(origin), tuple(eu), tuple(ev), tuple(u_range), tuple(v_range))

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneSpec":
        return cls(*(tuple(d[k]) for k in ("origin", "dir_u", "dir_v", "u_range", "v_range")))


@dataclass
class EnergyGrid:
    """Rows index v (dir_v), columns index u (dir_u), both ascending."""

    plane: PlaneSpec
    u: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    metric: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# plane " + json.dumps(self.plane.to_dict(), sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["row", "col", "u", "v", "energy", "metric"])
            for r in range(len(self.v)):
                for c in range(len(self.u)):
                    g = "" if self.metric is None else repr(float(self.metric[r, c]))
                    w.writerow([r, c, repr(float(self.u[c])), repr(float(self.v[r])),
                                repr(float(self.energy[r, c])), g])

    @classmethod
    def read_csv(cls, path) -> "EnergyGrid":
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith("# plane "):
                raise ValueError("grid CSV lacks a plane header")
            plane = PlaneSpec.from_dict(json.loads(first[len("# plane "):]))
            rows = list(csv.DictReader(fh))
        nr = max(int(r["row"]) for r in rows) + 1
        nc = max(int(r["col"]) for r in rows) + 1
        e = np.empty((nr, nc))
        g = np.empty((nr, nc)) if rows[0]["metric"] else None
        u, v = np.empty(nc), np.empty(nr)
        for r in rows:
            i, j = int(r["row"]), int(r["col"])
            e[i, j] = float(r["energy"])
            u[j], v[i] = float(r["u"]), float(r["v"])
            if g is not None:
                g[i, j] = float(r["metric"])
        return cls(plane, u, v, e, g)

    def write_svg(self, path, field_name: str = "energy") -> None:
        """Minimal heatmap (low = dark) without plotting dependencies."""
        z = self.energy if field_name == "energy" else self.metric
        lo, hi = float(np.min(z)), float(np.max(z))
        span = hi - lo if hi > lo else 1.0
        nr, nc = z.shape
        cell = 6
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{nc * cell}" height="{nr * cell}">']
        for r in range(nr):
            y = (nr - 1 - r) * cell
            for c in range(nc):
                k = int(255 * (z[r, c] - lo) / span)
                parts.append(f'<rect x="{c * cell}" y="{y}" width="{cell}" height="{cell}" fill="rgb({k},{k},{255 - k})"/>')
        parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(parts))


def export_energy_grid(model: EnergyModel | MetricField, plane: PlaneSpec, resolution: int = 64,
                       sigma: float | None = None) -> EnergyGrid:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    u = np.linspace(*plane.u_range, resolution)
    v = np.linspace(*plane.v_range, resolution)
    uu, vv = np.meshgrid(u, v)
    pts = (np.asarray(plane.origin)[None, :] + uu.reshape(-1, 1) * np.asarray(plane.dir_u)[None, :]
           + vv.reshape(-1, 1) * np.asarray(plane.dir_v)[None, :])
    metric = None
    if isinstance(model, MetricField):
        with torch.no_grad():
            e = model.metric_energy(as_tensor(pts)).numpy()
            metric = model(as_tensor(pts)).numpy().reshape(resolution, resolution)
    else:
        e = energy_at(model, pts, sigma)
    return EnergyGrid(plane, u, v, e.reshape(resolution, resolution), metric)


# --------------------------------------------------------------------------- timepoint protocol

def leave_one_out_eval(flow: Callable, ds: Dataset, schedule: TimeSchedule, *, n_steps: int = 100,
                       method: str = "rk4", max_n: int = 1024, seed: int = 0) -> EvalReport:
    """Push the earlier flanking marginal to each held-out time and score W1 against it."""
    per = {}
    for tgt in schedule.targets:
        x0 = ds.at_time(tgt.label_start)
        traj = integrate(flow, x0, (tgt.t_start, tgt.t_target), n_steps, method)
        per[tgt.label] = wasserstein1(traj[-1], ds.at_time(tgt.label), max_n, seed)
    vals = np.array(list(per.values()))
    return EvalReport("w1", float(vals.mean()), float(vals.std()), len(vals), [seed],
                      extra={"per_holdout": {str(k): v for k, v in per.items()}})
