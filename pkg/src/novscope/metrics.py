"""Learning-curve and coverage monitors for acquisition trajectories.

Coverage in patch, feature and target space is the fraction of discrete
regions (k-means clusters or equal-width histogram bins) visited by at
least one acquired point. The region models are built once per dataset
over all candidates and then frozen.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from novscope.dataset import OracleUnavailable, ScanDataset
from novscope.seeds import derive_seed

METRIC_COLUMNS = (
    "mae",
    "surrogate_mean",
    "surrogate_uncertainty",
    "patch_cov",
    "feat_cov",
    "target_cov",
)


# ---------------------------------------------------------------------------
# learning curves


def mae_step(posterior_mean, scalar_map) -> float:
    if scalar_map is None:
        raise OracleUnavailable("MAE needs ground truth")
    mu = np.asarray(posterior_mean, dtype=np.float64).ravel()
    y = np.asarray(scalar_map, dtype=np.float64).ravel()
    if mu.shape != y.shape:
        raise ValueError(f"prediction length {mu.size} != ground-truth length {y.size}")
    return float(np.mean(np.abs(mu - y)))


def surrogate_mean_step(posterior_mean) -> float:
    return float(np.mean(np.asarray(posterior_mean, dtype=np.float64)))


def surrogate_uncertainty_step(posterior_variance) -> float:
    var = np.asarray(posterior_variance, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variances must be nonnegative")
    return float(np.mean(np.sqrt(var)))


# ---------------------------------------------------------------------------
# region models


def random_projection(patches, out_dim: int, seed: int) -> np.ndarray:
    """Project flattened patches with a Gaussian matrix of variance ``1/out_dim``."""
    x = np.asarray(patches, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if not 1 <= out_dim <= x.shape[1]:
        raise ValueError(f"projection dim {out_dim} must lie in [1, {x.shape[1]}]")
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, np.sqrt(1.0 / out_dim), size=(x.shape[1], out_dim))
    return x @ proj


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    space: str = ""
    wcss_history: tuple = ()
    iterations: int = 0

    @property
    def n_regions(self) -> int:
        return int(np.unique(self.labels).size)


def _sq_to_centroids(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * x @ c.T + np.einsum("ij,ij->i", c, c)[None, :]
    return np.maximum(d, 0.0)


def _wcss(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_to_centroids(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_to_centroids(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 100, space: str = "") -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations to an assignment fixpoint.

    An emptied cluster is re-seeded at the point farthest from its current
    centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = np.argmin(_sq_to_centroids(x, centroids), axis=1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        d = _sq_to_centroids(x, centroids)
        for j in range(k):
            if not np.any(labels == j):
                far = int(np.argmax(d[np.arange(n), labels]))
                centroids[j] = x[far]
                labels[far] = j
                d[:, j] = _sq_to_centroids(x, centroids[[j]])[:, 0]
        history.append(_wcss(x, centroids, labels))
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    history.append(_wcss(x, centroids, labels))
    return ClusterModel(centroids, labels, space, tuple(history), it)


@dataclass(frozen=True, eq=False)
class LatentEmbedding:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    degenerate: bool = False


def latent_embed_all(
    patches, seed: int, n_components: int = 2, tol: float = 1e-9, max_iter: int = 100000
) -> LatentEmbedding:
    """Top principal components by power iteration with deflation.

    Components are sorted by explained variance and sign-fixed so that the
    largest-magnitude loading is positive. All-identical inputs give a zero
    embedding with ``degenerate=True``.
    """
    x = np.asarray(patches, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n, dim = x.shape
    if n < 3:
        raise ValueError("latent embedding needs at least three patches")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    scale = float(np.trace(cov))
    if scale <= 1e-24:
        warnings.warn("all patches identical; latent embedding is degenerate", RuntimeWarning)
        return LatentEmbedding(
            np.zeros((n, n_components)), np.zeros((n_components, dim)), np.zeros(n_components), mean, True
        )
    rng = np.random.default_rng(seed)
    comps, evals = [], []
    work = cov.copy()
    for _ in range(n_components):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                break
            w /= norm
            if w @ v < 0:
                w = -w
            delta = np.linalg.norm(w - v)
            v = w
            if delta < tol:
                break
        lam = max(float(v @ work @ v), 0.0)
        order = np.argmax(np.abs(v))
        if v[order] < 0:
            v = -v
        comps.append(v)
        evals.append(lam)
        work = work - lam * np.outer(v, v)
    comps = np.array(comps)
    evals = np.array(evals)
    order = np.argsort(-evals, kind="stable")
    comps, evals = comps[order], evals[order]
    return LatentEmbedding(xc @ comps.T, comps, evals, mean, False)


@dataclass(frozen=True, eq=False)
class BinModel:
    """Equal-width bins over the ground-truth range, top edge inclusive."""

    edges: np.ndarray
    labels: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    @property
    def n_regions(self) -> int:
        """Reachable bins (containing at least one ground-truth value)."""
        return int(np.unique(self.labels).size)


def build_bins(values, n_bins: int = 20) -> BinModel:
    y = np.asarray(values, dtype=np.float64).ravel()
    if n_bins < 1:
        raise ValueError(f"n_bins must be positive, got {n_bins}")
    lo, hi = float(y.min()), float(y.max())
    if hi > lo:
        edges = np.linspace(lo, hi, n_bins + 1)
        labels = np.floor((y - lo) / (hi - lo) * n_bins).astype(np.int64)
    else:
        edges = lo + np.arange(n_bins + 1, dtype=np.float64)
        labels = np.zeros(y.size, dtype=np.int64)
    return BinModel(edges, np.clip(labels, 0, n_bins - 1))


def coverage_step(model, acquired) -> float:
    """Fraction of regions of ``model`` holding at least one acquired index."""
    acquired = np.asarray(acquired, dtype=np.int64)
    if acquired.size == 0:
        raise ValueError("coverage needs at least one acquired point")
    return np.unique(model.labels[acquired]).size / model.n_regions


def coverage_series(model, acquired_sequence) -> np.ndarray:
    """Coverage after each prefix of an acquisition sequence."""
    seen = set()
    out = np.empty(len(acquired_sequence))
    labels = model.labels
    denom = model.n_regions
    for t, j in enumerate(acquired_sequence):
        seen.add(int(labels[int(j)]))
        out[t] = len(seen) / denom
    return out


# ---------------------------------------------------------------------------
# frozen per-dataset models


@dataclass(frozen=True)
class MetricsConfig:
    clusters: int = 50
    bins: int = 20
    projection_dim: int = 32
    seed: Optional[int] = None
    dispersion_window: int = 50


@dataclass(frozen=True, eq=False)
class MetricModels:
    patch: ClusterModel
    feature: ClusterModel
    target: Optional[BinModel]
    embedding: LatentEmbedding
    seed: int = 0


def build_metric_models(dataset: ScanDataset, config: MetricsConfig, seed: int) -> MetricModels:
    patches = dataset.all_patches(standardize=True)
    n = patches.shape[0]
    k = min(config.clusters, n)
    m = min(config.projection_dim, patches.shape[1] * patches.shape[2])
    projected = random_projection(patches, m, derive_seed(seed, "projection"))
    patch_model = kmeans(projected, k, derive_seed(seed, "kmeans"), space="patch-projected")
    emb = latent_embed_all(patches, derive_seed(seed, "pca"))
    feat_model = kmeans(emb.coords, k, derive_seed(seed, "kmeans-feature"), space="latent")
    target = build_bins(dataset.ground_truth(), config.bins) if dataset.has_map else None
    return MetricModels(patch_model, feat_model, target, emb, seed)


# ---------------------------------------------------------------------------
# series


@dataclass(eq=False)
class MetricSeries:
    """Per-step monitor values; NaN marks a metric unavailable at that step."""

    step: np.ndarray
    mae: np.ndarray
    surrogate_mean: np.ndarray
    surrogate_uncertainty: np.ndarray
    patch_cov: np.ndarray
    feat_cov: np.ndarray
    target_cov: np.ndarray

    def __len__(self) -> int:
        return self.step.size

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("step",) + METRIC_COLUMNS)
        for i in range(len(self)):
            writer.writerow([int(self.step[i])] + [fmt(self.column(c)[i]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricSeries":
        rows = list(csv.DictReader(io.StringIO(text)))
        cols = {c: np.array([parse_float(r[c]) for r in rows]) for c in METRIC_COLUMNS}
        return cls(step=np.array([int(r["step"]) for r in rows]), **cols)


def fmt(value) -> str:
    """Nine significant digits; empty for missing values."""
    if value is None:
        return ""
    value = float(value)
    if np.isnan(value):
        return ""
    return f"{value:.9g}"


def parse_float(text: str) -> float:
    return float(text) if text.strip() else float("nan")


def assemble_series(
    acquired: Sequence[int],
    models: MetricModels,
    learning: dict,
) -> MetricSeries:
    """Combine coverage (computed from the acquisition order) with learning curves.

    ``learning`` maps step -> (mae, mean, uncertainty); steps without an
    entry are left empty.
    """
    T = len(acquired)
    steps = np.arange(1, T + 1)
    cols = {c: np.full(T, np.nan) for c in ("mae", "surrogate_mean", "surrogate_uncertainty")}
    for t, (mae, mean, unc) in learning.items():
        cols["mae"][t - 1] = np.nan if mae is None else mae
        cols["surrogate_mean"][t - 1] = mean
        cols["surrogate_uncertainty"][t - 1] = unc
    target = (
        coverage_series(models.target, acquired) if models.target is not None else np.full(T, np.nan)
    )
    return MetricSeries(
        step=steps,
        patch_cov=coverage_series(models.patch, acquired),
        feat_cov=coverage_series(models.feature, acquired),
        target_cov=target,
        **cols,
    )
