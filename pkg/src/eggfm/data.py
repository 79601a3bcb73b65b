"""Point clouds: loading/saving, PCA whitening, synthetic manifolds, clustering, weighted minibatches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import blob


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """n x d points with optional per-row timepoint label, cluster id and sampling weight."""

    points: np.ndarray
    timepoint: np.ndarray | None = None
    cluster_id: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise DataError(f"points must be 2-d, got shape {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite value in row {int(np.flatnonzero(bad)[0])}")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.timepoint is not None:
            tp = np.asarray(self.timepoint)
            if tp.shape != (n,):
                raise DataError("timepoint must have one entry per row")
            if not np.all(tp == np.round(tp)):
                raise DataError("timepoint labels must be integers")
            object.__setattr__(self, "timepoint", tp.astype(np.int64))
        if self.cluster_id is not None:
            cid = np.asarray(self.cluster_id, dtype=np.int64)
            if cid.shape != (n,):
                raise DataError("cluster_id must have one entry per row")
            if n and (cid.min() != 0 or len(np.unique(cid)) != cid.max() + 1):
                raise DataError("cluster ids must be contiguous from 0")
            object.__setattr__(self, "cluster_id", cid)
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=np.float64)
            if w.shape != (n,):
                raise DataError("weight must have one entry per row")
            if not np.isfinite(w).all() or (w < 0).any() or w.sum() <= 0:
                raise DataError("weights must be finite, nonnegative and not all zero")
            object.__setattr__(self, "weight", w / w.sum())

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_clusters(self) -> int:
        return 1 if self.cluster_id is None else int(self.cluster_id.max()) + 1

    def clusters(self) -> np.ndarray:
        return np.zeros(self.n, dtype=np.int64) if self.cluster_id is None else self.cluster_id

    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n) if self.weight is None else self.weight

    def with_weights(self, w) -> "Dataset":
        return replace(self, weight=np.asarray(w, dtype=np.float64))

    def with_clusters(self, labels) -> "Dataset":
        return replace(self, cluster_id=np.asarray(labels, dtype=np.int64))

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        take = lambda a: None if a is None else a[mask]
        w = take(self.weight)
        cid = take(self.cluster_id)
        if cid is not None:
            _, cid = np.unique(cid, return_inverse=True)
        return Dataset(self.points[mask], take(self.timepoint), cid, w)

    def at_time(self, label: int) -> np.ndarray:
        if self.timepoint is None:
            raise DataError("dataset has no timepoint column")
        pts = self.points[self.timepoint == label]
        if len(pts) == 0:
            raise DataError(f"no rows with timepoint {label}")
        return pts

    def timepoints(self) -> list[int]:
        if self.timepoint is None:
            raise DataError("dataset has no timepoint column")
        return sorted(int(t) for t in np.unique(self.timepoint))


# --------------------------------------------------------------------------- file formats

def _columns(ds: Dataset) -> list[str]:
    cols = [f"f{i}" for i in range(ds.d)]
    if ds.timepoint is not None:
        cols.append("t")
    if ds.weight is not None:
        cols.append("w")
    return cols


def save_dataset(ds: Dataset, path, fmt: str | None = None) -> None:
    fmt = fmt or _guess_format(path)
    cols = _columns(ds)
    table = [ds.points]
    if ds.timepoint is not None:
        table.append(ds.timepoint[:, None].astype(np.float64))
    if ds.weight is not None:
        table.append(ds.weight[:, None])
    mat = np.hstack(table)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in mat:
                w.writerow([repr(float(v)) if c not in ("t",) else str(int(v)) for c, v in zip(cols, row)])
    elif fmt == "bin":
        header = {"n": ds.n, "d": ds.d, "columns": cols}
        blob.save(path, "dataset", header, {"data": mat})
    else:
        raise DataError(f"unknown dataset format {fmt!r}")


def _guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".bin", ".eggd", ".f64"):
        return "bin"
    raise DataError(f"cannot infer dataset format from {str(path)!r}; pass fmt='csv' or 'bin'")


def _from_columns(cols: list[str], mat: np.ndarray, require_time: bool) -> Dataset:
    feats = [c for c in cols if c.startswith("f")]
    expected = [f"f{i}" for i in range(len(feats))]
    if feats != expected or not feats:
        raise DataError(f"feature columns must be f0..f{{d-1}} in order, got {feats}")
    unknown = set(cols) - set(feats) - {"t", "w"}
    if unknown:
        raise DataError(f"unknown columns {sorted(unknown)}")
    idx = {c: i for i, c in enumerate(cols)}
    pts = mat[:, [idx[c] for c in feats]]
    tp = mat[:, idx["t"]] if "t" in idx else None
    if require_time and tp is None:
        raise DataError("dataset needs a timepoint column 't'")
    w = mat[:, idx["w"]] if "w" in idx else None
    return Dataset(pts, tp, None, w)


def load_dataset(path, fmt: str | None = None, require_time: bool = False) -> Dataset:
    fmt = fmt or _guess_format(path)
    if fmt == "bin":
        try:
            header, arrays = blob.load(path, kind="dataset")
        except blob.BlobError as exc:
            raise DataError(str(exc)) from None
        mat = arrays["data"]
        if mat.shape != (header["n"], len(header["columns"])):
            raise DataError("binary dataset payload does not match header")
        return _from_columns(header["columns"], mat, require_time)
    if fmt != "csv":
        raise DataError(f"unknown dataset format {fmt!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            cols = [c.strip() for c in next(reader)]
        except StopIteration:
            raise DataError("empty CSV file") from None
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(cols):
                raise DataError(f"row {lineno}: expected {len(cols)} cells, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise DataError(f"row {lineno}: non-numeric cell") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"row {lineno}: non-finite value")
            rows.append(vals)
    mat = np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))
    return _from_columns(cols, mat, require_time)


# --------------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray  # d x k, orthonormal columns
    scales: np.ndarray      # k

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.components / self.scales

    def inverse_transform(self, z) -> np.ndarray:
        return (np.asarray(z) * self.scales) @ self.components.T + self.mean


def pca_whiten(points, k: int, rtol: float = 1e-10) -> tuple[PcaTransform, np.ndarray]:
    """Project onto the top-k principal axes and scale each to unit variance.

    Uses the population covariance (1/n), so the returned data has covariance
    exactly I_k up to rounding.
    """
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= d or n <= k:
        raise DataError(f"need n > k >= 1 and k <= d, got n={n}, d={d}, k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, comps = evals[order], evecs[:, order]
    top = max(float(evals[0]), 0.0)
    if top <= 0 or evals[-1] <= rtol * top:
        raise DataError(f"data is rank-deficient along component {k}; try a smaller k")
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * signs
    pca = PcaTransform(mean, comps, np.sqrt(evals))
    return pca, pca.transform(x)


# --------------------------------------------------------------------------- synthetic data

def sample_sphere(dim: int, n: int, seed: int = 0) -> Dataset:
    """n points uniform on the unit sphere S^{dim-1} in R^dim."""
    if dim < 2 or n < 1:
        raise DataError("sample_sphere needs dim >= 2 and n >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, dim))
    return Dataset(g / np.linalg.norm(g, axis=1, keepdims=True))


def split_timepoints(ds: Dataset, n_times: int = 2, seed: int = 0) -> Dataset:
    """Assign random equal-size timepoint labels 0..n_times-1 (sphere setting)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(ds.n) % n_times
    return replace(ds, timepoint=rng.permutation(labels))


def sample_barbell(n: int = 2000, bridge_frac: float = 0.02, sep: float = 4.0, blob_std: float = 0.5,
                   bridge_std: float = 0.08, seed: int = 0) -> Dataset:
    """Two Gaussian blobs at (+-sep/2, 0) joined by a sparse, thin horizontal bridge."""
    rng = np.random.default_rng(seed)
    n_bridge = int(round(bridge_frac * n))
    n_blob = (n - n_bridge) // 2
    a = rng.normal([-sep / 2, 0.0], blob_std, size=(n_blob, 2))
    b = rng.normal([sep / 2, 0.0], blob_std, size=(n - n_bridge - n_blob, 2))
    bx = rng.uniform(-sep / 2, sep / 2, size=n_bridge)
    bridge = np.column_stack([bx, rng.normal(0.0, bridge_std, size=n_bridge)])
    return Dataset(np.vstack([a, b, bridge]))


def sample_arc(n_per_time: int = 400, n_times: int = 3, radius: float = 1.0, angle_std: float = 0.22,
               radial_std: float = 0.03, seed: int = 0) -> Dataset:
    """Timepoint clouds spread along a half-circle arc; the interior of the arc is empty.

    Timepoint k is centred at angle pi*(0.15 + 0.7 k/(n_times-1)), so straight
    chords between early and late clouds cut through the empty interior.
    """
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for k in range(n_times):
        centre = math.pi * (0.15 + 0.7 * k / max(n_times - 1, 1))
        ang = rng.normal(centre, angle_std, size=n_per_time)
        r = radius + rng.normal(0.0, radial_std, size=n_per_time)
        pts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        labels.append(np.full(n_per_time, k))
    return Dataset(np.vstack(pts), np.concatenate(labels))


def sample_ring(n: int = 2000, kappa: float = 2.0, radial_std: float = 0.03, seed: int = 0) -> Dataset:
    """Unit circle with von Mises distributed angle (mean 0, concentration kappa)."""
    rng = np.random.default_rng(seed)
    ang = rng.vonmises(0.0, kappa, size=n)
    r = 1.0 + rng.normal(0.0, radial_std, size=n)
    return Dataset(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))


# --------------------------------------------------------------------------- clustering

@dataclass(frozen=True)
class ClusterModel:
    method: str
    n_clusters: int
    labels: np.ndarray
    centers: np.ndarray  # per-cluster mean, used to assign new points

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)


def _relabel(labels: np.ndarray) -> np.ndarray:
    # contiguous ids ordered by first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    _, inv = np.unique(labels, return_inverse=True)
    return remap[inv]


def fit_clusters(ds: Dataset | np.ndarray, method: str = "kmeans", n_clusters: int = 1, *,
                 n_neighbors: int = 10, resolution: float = 0.3, seed: int = 0) -> ClusterModel:
    """Partition the points; 'kmeans' (J fixed) or 'graph' (kNN-graph modularity communities)."""
    x = ds.points if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    n = len(x)
    if method == "kmeans":
        if not 1 <= n_clusters <= n:
            raise DataError(f"need 1 <= J <= n, got J={n_clusters}, n={n}")
        if n_clusters == 1:
            labels = np.zeros(n, dtype=np.int64)
        else:
            from sklearn.cluster import KMeans

            km = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed).fit(x)
            labels = _relabel(km.labels_)
    elif method in ("graph", "graph_community"):
        labels = _graph_communities(x, n_neighbors, resolution, seed)
        method = "graph_community"
    else:
        raise DataError(f"unknown clustering method {method!r}")
    J = int(labels.max()) + 1
    centers = np.stack([x[labels == j].mean(axis=0) for j in range(J)])
    return ClusterModel(method, J, labels, centers)


def _graph_communities(x: np.ndarray, n_neighbors: int, resolution: float, seed: int) -> np.ndarray:
    import networkx as nx
    from sklearn.neighbors import NearestNeighbors

    n = len(x)
    k = min(n_neighbors, n - 1)
    if k < 1 or resolution <= 0:
        return np.zeros(n, dtype=np.int64)
    nbrs = NearestNeighbors(n_neighbors=k + 1).fit(x)
    _, idx = nbrs.kneighbors(x)
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((i, int(j)) for i in range(n) for j in idx[i, 1:])
    comms = nx.community.louvain_communities(g, resolution=resolution, seed=seed)
    labels = np.empty(n, dtype=np.int64)
    for c, members in enumerate(sorted(comms, key=min)):
        labels[list(members)] = c
    return _relabel(labels)


# --------------------------------------------------------------------------- sampling

def weighted_minibatch(ds: Dataset | np.ndarray, batch_size: int, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Row indices drawn i.i.d. with probability proportional to the dataset weights."""
    w = ds.weights() if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    w = w / w.sum()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(len(w), size=batch_size, replace=True, p=w)
