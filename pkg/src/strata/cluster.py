"""Pixel clustering of PCA scores: Lloyd's K-means and EM-fitted Gaussian mixtures.

Both algorithms take an ``(N, k)`` score matrix or a :class:`ScoreCube` and are
deterministic for a given seed. Ties between clusters always go to the lowest
index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from . import parallel
from .cube_io import GrayImage, SpectralCube
from .dimred import ScoreCube
from .errors import (
    DimensionMismatch,
    EmptyClusterResolved,
    InvalidClusterId,
    InvalidValue,
    SingularCovariance,
    TooFewPoints,
    TooManyClusters,
)

__all__ = [
    "KMeansModel",
    "GmmModel",
    "LabelMap",
    "kmeans_plusplus",
    "kmeans_fit",
    "gmm_fit",
    "gmm_assign",
    "gmm_log_likelihood",
    "assign_nearest",
    "render_label_map",
    "extract_layer",
]

ScoresLike = Union[ScoreCube, np.ndarray]


@dataclass(frozen=True, eq=False)
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture weights, means and covariances.

    ``covariances`` is ``(K, k, k)`` in full mode and ``(K, k)`` (diagonals) in
    diagonal mode. ``log_likelihood`` is the mean per-pixel value at the final
    parameters.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_type: str
    log_likelihood: float
    iterations: int
    reg: float = 0.0
    history: tuple[float, ...] = field(default=())

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def full_covariances(self) -> np.ndarray:
        if self.covariance_type == "full":
            return self.covariances
        return np.stack([np.diag(d) for d in self.covariances])


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise InvalidValue("labels", f"expected (height, width), got {lab.shape}")
        if self.k < 1:
            raise InvalidValue("k", "need at least one cluster")
        if lab.size and (lab.min() < 0 or lab.max() >= self.k):
            raise InvalidValue("labels", f"label outside [0, {self.k})")
        object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def _matrix(scores: ScoresLike) -> tuple[np.ndarray, tuple[int, int]]:
    if isinstance(scores, ScoreCube):
        return scores.matrix(), (scores.height, scores.width)
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidValue("scores", f"expected (N, k) matrix, got shape {x.shape}")
    return x, (1, x.shape[0])


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``(N, K)`` squared Euclidean distances, computed from explicit differences."""
    out = np.empty((x.shape[0], centroids.shape[0]))

    def work(s: slice):
        xs = x[s]
        for j, c in enumerate(centroids):
            d = xs - c
            out[s, j] = np.einsum("ij,ij->i", d, d)

    parallel.map_ordered(work, parallel.chunks(x.shape[0], parallel.PIXEL_CHUNK))
    return out


def assign_nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _sq_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def _distinct_count(x: np.ndarray, limit: int) -> int:
    # cheap exit: enough distinct rows among the first few thousand
    head = np.unique(x[: max(limit * 64, 4096)], axis=0).shape[0]
    if head >= limit:
        return head
    return np.unique(x, axis=0).shape[0]


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D²-weighted seeding; returns ``k`` rows of ``x``."""
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_distances(x, x[idx])[:, 0]
    for _ in range(1, k):
        cum = np.cumsum(closest)
        total = cum[-1]
        if total <= 0:
            # every point coincides with a chosen seed; take the first unused row
            unused = np.setdiff1d(np.arange(n), idx)
            pick = int(unused[0])
        else:
            pick = int(np.searchsorted(cum, rng.random() * total, side="right"))
            pick = min(pick, n - 1)
            while closest[pick] <= 0:  # land on a zero-weight row only via rounding
                pick -= 1
        idx.append(pick)
        np.minimum(closest, _sq_distances(x, x[pick:pick + 1])[:, 0], out=closest)
    return x[idx].copy()


def _centroid_update(x: np.ndarray, labels: np.ndarray, k: int,
                     old: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sums = np.zeros((k, x.shape[1]))
    counts = np.zeros(k, dtype=np.int64)
    for s in parallel.chunks(x.shape[0], parallel.PIXEL_CHUNK):
        lab = labels[s]
        for j in range(k):
            sel = lab == j
            sums[j] += x[s][sel].sum(axis=0)
            counts[j] += int(sel.sum())
    cent = old.copy()
    nz = counts > 0
    cent[nz] = sums[nz] / counts[nz, None]
    return cent, counts


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    k = centroids.shape[0]
    labels, d2 = assign_nearest(x, centroids)
    history = [float(d2.sum())]
    it = 0
    while it < max_iter:
        it += 1
        new, counts = _centroid_update(x, labels, k, centroids)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster with the point farthest from its centroid
            far = int(np.argmax(d2))
            warnings.warn(f"cluster {j} went empty; reseeded with point {far}",
                          EmptyClusterResolved, stacklevel=3)
            new[j] = x[far]
            labels[far] = j
            d2[far] = 0.0
            new, counts = _centroid_update(x, labels, k, new)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d2 = assign_nearest(x, centroids)
        history.append(float(d2.sum()))
        if shift < tol:
            break
    return centroids, labels, it, history


def kmeans_fit(scores: ScoresLike, k: int, seed: int = 0, max_iter: int = 300,
               tol: float = 1e-4, restarts: int = 1) -> tuple[KMeansModel, LabelMap]:
    """Lloyd's algorithm from k-means++ seeds, best of ``restarts`` by inertia.

    Iteration stops once no centroid moves by ``tol`` or more (Euclidean), or
    after ``max_iter`` updates. ``inertia_history`` records the inertia after
    each assignment step of the winning restart.
    """
    x, shape = _matrix(scores)
    if k < 1:
        raise InvalidValue("k", "need at least one cluster")
    distinct = _distinct_count(x, k)
    if k > distinct:
        raise TooManyClusters(k, distinct)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        init = kmeans_plusplus(x, k, rng)
        cent, labels, it, hist = _lloyd(x, init, max_iter, tol)
        if best is None or hist[-1] < best[3][-1]:
            best = (cent, labels, it, hist)
    cent, labels, it, hist = best
    model = KMeansModel(cent, hist[-1], it, tuple(hist))
    return model, LabelMap(labels.reshape(shape), k)


# -- Gaussian mixtures -------------------------------------------------------

_LOG_2PI = np.log(2 * np.pi)


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray, diag: bool,
               component: int) -> np.ndarray:
    d = x.shape[1]
    if diag:
        if (cov <= 0).any():
            raise SingularCovariance(component)
        z2 = ((x - mean) ** 2 / cov).sum(axis=1)
        logdet = np.log(cov).sum()
    else:
        try:
            chol = cholesky(cov, lower=True)
        except LinAlgError:
            raise SingularCovariance(component) from None
        if (np.diag(chol) <= 0).any():
            raise SingularCovariance(component)
        sol = solve_triangular(chol, (x - mean).T, lower=True)
        z2 = np.einsum("ij,ij->j", sol, sol)
        logdet = 2 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * _LOG_2PI + logdet + z2)


def _weighted_log_probs(x: np.ndarray, weights, means, covs, diag: bool) -> np.ndarray:
    """``(N, K)`` array of ``log w_j + log N(x | mu_j, Sigma_j)``."""
    out = np.empty((x.shape[0], weights.shape[0]))
    logw = np.log(weights)

    def work(s: slice):
        for j in range(weights.shape[0]):
            out[s, j] = logw[j] + _log_gauss(x[s], means[j], covs[j], diag, j)

    parallel.map_ordered(work, parallel.chunks(x.shape[0], parallel.PIXEL_CHUNK))
    return out


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _e_step(x, weights, means, covs, diag):
    logp = _weighted_log_probs(x, weights, means, covs, diag)
    norm = _logsumexp_rows(logp)
    return np.exp(logp - norm[:, None]), float(norm.sum() / x.shape[0])


def _m_step(x, resp, diag: bool, reg: float):
    n, d = x.shape
    k = resp.shape[1]
    nk = np.zeros(k)
    sums = np.zeros((k, d))
    for s in parallel.chunks(n, parallel.PIXEL_CHUNK):
        nk += resp[s].sum(axis=0)
        sums += resp[s].T @ x[s]
    nk = np.maximum(nk, 10 * np.finfo(float).eps)
    means = sums / nk[:, None]
    covs = np.zeros((k, d) if diag else (k, d, d))
    for s in parallel.chunks(n, parallel.PIXEL_CHUNK):
        for j in range(k):
            diff = x[s] - means[j]
            r = resp[s, j]
            if diag:
                covs[j] += r @ (diff * diff)
            else:
                covs[j] += (diff * r[:, None]).T @ diff
    covs /= nk[:, None] if diag else nk[:, None, None]
    if diag:
        covs += reg
    else:
        covs = (covs + covs.transpose(0, 2, 1)) / 2
        covs += reg * np.eye(d)
    return nk / nk.sum(), means, covs


def _pooled_covariance(x: np.ndarray, diag: bool, reg: float) -> np.ndarray:
    diff = x - x.mean(axis=0)
    cov = diff.T @ diff / x.shape[0]
    if diag:
        return np.diag(cov) + reg
    return cov + reg * np.eye(x.shape[1])


def gmm_fit(scores: ScoresLike, k: int, covariance: str = "full", seed: int = 0,
            max_iter: int = 300, tol: float = 1e-6, reg: float = 1e-6,
            restarts: int = 1, init_iter: int = 0) -> GmmModel:
    """Fit a ``k``-component Gaussian mixture by expectation-maximization.

    Each restart seeds the means with k-means++ (optionally refined by
    ``init_iter`` Lloyd steps), starts from uniform weights and the pooled data covariance, and
    iterates until the mean per-pixel log-likelihood gains less than ``tol``.
    ``reg`` is added to every covariance diagonal; with ``reg=0`` a collapsing
    component raises :class:`SingularCovariance`. The restart with the highest
    final log-likelihood wins.
    """
    if covariance not in ("full", "diag", "diagonal"):
        raise InvalidValue("covariance", f"expected 'full' or 'diag', got {covariance!r}")
    diag = covariance != "full"
    x, _ = _matrix(scores)
    n, d = x.shape
    if k < 1:
        raise InvalidValue("k", "need at least one component")
    if n <= k:
        raise TooFewPoints(n, k)
    distinct = _distinct_count(x, k)
    if k > distinct:
        raise TooManyClusters(k, distinct)

    rng = np.random.default_rng(seed)
    pooled = _pooled_covariance(x, diag, reg)
    best: GmmModel | None = None
    for _ in range(max(1, restarts)):
        means = kmeans_plusplus(x, k, rng)
        if init_iter > 0:
            means, _, _, _ = _lloyd(x, means, init_iter, 0.0)
        weights = np.full(k, 1.0 / k)
        covs = np.stack([pooled] * k)
        resp, ll = _e_step(x, weights, means, covs, diag)
        history = [ll]
        it = 0
        while it < max_iter:
            it += 1
            weights, means, covs = _m_step(x, resp, diag, reg)
            resp, ll = _e_step(x, weights, means, covs, diag)
            history.append(ll)
            if ll - history[-2] < tol:
                break
        model = GmmModel(weights, means, covs, "diag" if diag else "full", ll, it, reg,
                         tuple(history))
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    return best


def gmm_log_likelihood(scores: ScoresLike, model: GmmModel) -> float:
    """Mean per-pixel log-likelihood of ``scores`` under ``model``."""
    x, _ = _matrix(scores)
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"scores have {x.shape[1]} dims, model {model.dim}")
    logp = _weighted_log_probs(x, model.weights, model.means, model.covariances,
                               model.covariance_type == "diag")
    return float(_logsumexp_rows(logp).sum() / x.shape[0])


def gmm_assign(scores: ScoresLike, model: GmmModel) -> LabelMap:
    """Maximum-posterior component for every pixel."""
    x, shape = _matrix(scores)
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"scores have {x.shape[1]} dims, model {model.dim}")
    logp = _weighted_log_probs(x, model.weights, model.means, model.covariances,
                               model.covariance_type == "diag")
    return LabelMap(np.argmax(logp, axis=1).reshape(shape), model.k)


# -- rendering ---------------------------------------------------------------


def cluster_levels(k: int) -> np.ndarray:
    """Gray level of each cluster index: ``round(i * 255 / max(k - 1, 1))``."""
    i = np.arange(k)
    return np.floor(i * 255 / max(k - 1, 1) + 0.5).astype(np.uint8)


def render_label_map(labels: LabelMap) -> GrayImage:
    return GrayImage(cluster_levels(labels.k)[labels.labels])


def extract_layer(cube: SpectralCube | None, labels: LabelMap, cluster_ids: Iterable[int],
                  mode: str = "mask") -> GrayImage:
    """Binary rendering of the pixels belonging to ``cluster_ids``.

    ``mode="mask"`` paints them white on black; ``"inverse"`` paints them black
    on white. ``cube`` only has to agree with the label map's geometry.
    """
    ids = sorted(set(int(c) for c in cluster_ids))
    for c in ids:
        if not 0 <= c < labels.k:
            raise InvalidClusterId(c, labels.k)
    if mode not in ("mask", "inverse"):
        raise InvalidValue("mode", f"expected 'mask' or 'inverse', got {mode!r}")
    if cube is not None and (cube.height, cube.width) != (labels.height, labels.width):
        raise DimensionMismatch(
            f"cube is {cube.width}x{cube.height}, labels {labels.width}x{labels.height}")
    hit = np.isin(labels.labels, ids)
    if mode == "inverse":
        hit = ~hit
    return GrayImage(np.where(hit, 255, 0).astype(np.uint8))
