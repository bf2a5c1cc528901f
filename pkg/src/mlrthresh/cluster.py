"""Clustering backends for the thresholded covariates.

Three interchangeable backends partition the retained points into ``k``
groups: k-means++ seeded Lloyd iterations (default), trimmed k-means, and
a single-linkage dendrogram cut used as a parameter-free cross-check.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.stats import trim_mean
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import kmeans_plusplus
from sklearn.utils.validation import check_array, check_is_fitted

from . import _rng
from .exceptions import DegenerateClusterError, RankError, ValidationError

BACKENDS = ("kmeans_pp", "trimmed_kmeans", "single_linkage_cut")

# Single linkage needs the full condensed distance matrix; larger inputs
# are subsampled to this many points before building the dendrogram.
LINKAGE_MAX_POINTS = 2000

MIN_POINTS_PER_CLUSTER = 10


@dataclass(frozen=True)
class ClusterParams:
    k: int
    backend: str = "kmeans_pp"
    restarts: int = 20
    trim_fraction: float = 0.05
    pca_preprocess: bool = True
    max_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be at least 1")
        if self.restarts < 1:
            raise ValidationError("restarts must be at least 1")
        if self.backend not in BACKENDS:
            raise ValidationError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if not 0 <= self.trim_fraction <= 0.2:
            raise ValidationError("trim_fraction must lie in [0, 0.2]")


@dataclass
class ClusterResult:
    assignment: np.ndarray
    means: np.ndarray
    sizes: np.ndarray
    objective: float
    backend_used: str
    objective_history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "backend": self.backend_used,
            "sizes": [int(s) for s in self.sizes],
            "means": self.means.tolist(),
            "objective": float(self.objective),
        }


class Projection(NamedTuple):
    projected: np.ndarray
    basis: np.ndarray

    def lift(self, coords):
        """Map projected coordinates back into the ambient space."""
        return np.asarray(coords) @ self.basis


def pca_project(points, k):
    """Project onto the top-``k`` right singular subspace of ``points``.

    The second moment is not centred: the cluster means span a
    ``k``-dimensional subspace that contains the grand mean, and the
    uncentred moment keeps all of it.

    Raises
    ------
    RankError
        If the points have numerical rank below ``k``.
    """
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if n < k or d < k:
        raise ValidationError(f"need at least k={k} points and dimensions, got {X.shape}")
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    if s[0] == 0 or s[k - 1] <= s[0] * 1e-10:
        raise RankError(f"points have numerical rank below k={k}")
    basis = vt[:k].copy()
    # fix the sign of each row for reproducible output
    pivots = np.abs(basis).argmax(axis=1)
    basis *= np.sign(basis[np.arange(k), pivots])[:, None]
    return Projection(X @ basis.T, basis)


def robust_mean(points, trim_fraction):
    """Coordinate-wise trimmed mean.

    Drops ``floor(trim_fraction * n)`` of the smallest and largest values
    in every coordinate; ``trim_fraction=0`` is the plain mean.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not 0 <= trim_fraction < 0.5:
        raise ValidationError("trim_fraction must lie in [0, 0.5)")
    if X.shape[0] < 3:
        raise ValidationError("robust_mean needs at least 3 points")
    if trim_fraction == 0:
        return X.mean(axis=0)
    return trim_mean(X, trim_fraction, axis=0)


def _sq_dists(X, centers):
    d2 = (X**2).sum(1)[:, None] - 2.0 * X @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _lloyd(X, centers, max_iters, trim_fraction=0.0):
    """Lloyd iterations; returns labels, centers, per-iteration objectives.

    With ``trim_fraction > 0`` each update ignores the farthest fraction
    of points (trimmed k-means), and the objective is the trimmed sum.
    Returns ``None`` if an empty cluster cannot be repaired.
    """
    n, k = X.shape[0], centers.shape[0]
    n_keep = n - int(np.floor(trim_fraction * n))
    history = []
    repairs = 0
    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(X, centers)
        new_labels = d2.argmin(axis=1)
        best = d2[np.arange(n), new_labels]
        if n_keep < n:
            kept = np.argpartition(best, n_keep - 1)[:n_keep]
            mask = np.zeros(n, dtype=bool)
            mask[kept] = True
        else:
            mask = np.ones(n, dtype=bool)
        history.append(float(best[mask].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        new_centers = centers.copy()
        for j in range(k):
            members = mask & (labels == j)
            if members.any():
                new_centers[j] = X[members].mean(axis=0)
            else:
                if repairs >= k:
                    return None
                repairs += 1
                new_centers[j] = X[best.argmax()]
                best[best.argmax()] = 0.0
        centers = new_centers
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    return labels, centers, history


def _principal_axis(X):
    _, _, vt = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
    axis = vt[0]
    return axis * np.sign(axis[np.abs(axis).argmax()])


def _canonical_order(means, axis):
    return np.lexsort((np.arange(means.shape[0]), means @ axis))


def _kmeans_backend(Xc, params, trim):
    best = None
    for r in range(params.restarts):
        rng = _rng.stream(params.seed, "kmeans", r)
        init, _ = kmeans_plusplus(Xc, params.k, random_state=int(rng.integers(2**31 - 1)))
        out = _lloyd(Xc, init, params.max_iters, trim)
        if out is None:
            continue
        labels, _, history = out
        if best is None or history[-1] < best[2][-1]:
            best = (labels, r, history)
    if best is None:
        raise DegenerateClusterError(f"all {params.restarts} restarts produced empty clusters")
    return best[0], best[2]


def _single_linkage_backend(Xc, params):
    n = Xc.shape[0]
    if n > LINKAGE_MAX_POINTS:
        rng = _rng.stream(params.seed, "linkage")
        idx = np.sort(rng.choice(n, LINKAGE_MAX_POINTS, replace=False))
    else:
        idx = np.arange(n)
    tree = linkage(Xc[idx], method="single")
    sub = fcluster(tree, t=params.k, criterion="maxclust") - 1
    if np.unique(sub).shape[0] < params.k:
        raise DegenerateClusterError("dendrogram cut produced fewer than k clusters")
    centers = np.array([Xc[idx][sub == j].mean(axis=0) for j in range(params.k)])
    labels = _sq_dists(Xc, centers).argmin(axis=1)
    return labels, []


def cluster_points(points, params):
    """Partition ``points`` into ``params.k`` clusters.

    The best restart by objective is kept (earliest restart on ties).
    Clusters are relabelled in increasing order of their mean's first
    principal coordinate.

    Raises
    ------
    ValidationError
        If there are fewer than ``10 * k`` points.
    DegenerateClusterError
        If empty clusters persist in every restart.
    """
    X = check_array(points, dtype=np.float64)
    n, d = X.shape
    k = params.k
    if n < MIN_POINTS_PER_CLUSTER * k:
        raise ValidationError(f"need at least {MIN_POINTS_PER_CLUSTER * k} points for k={k}, got {n}")

    if params.pca_preprocess and d > 2 * k:
        Xc = pca_project(X, k).projected
    else:
        Xc = X

    if k == 1:
        labels, history = np.zeros(n, dtype=int), []
    elif params.backend == "single_linkage_cut":
        labels, history = _single_linkage_backend(Xc, params)
    else:
        trim = params.trim_fraction if params.backend == "trimmed_kmeans" else 0.0
        labels, history = _kmeans_backend(Xc, params, trim)

    sizes = np.bincount(labels, minlength=k)
    if (sizes == 0).any():
        raise DegenerateClusterError(f"cluster sizes {sizes.tolist()} contain an empty cluster")

    trim = params.trim_fraction if params.backend == "trimmed_kmeans" else 0.0
    means = np.array([_cluster_mean(X[labels == j], trim) for j in range(k)])
    order = _canonical_order(means, _principal_axis(X)) if k > 1 else np.zeros(1, dtype=int)
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    labels = relabel[labels]
    means = means[order]
    sizes = sizes[order]
    objective = float(sum(((X[labels == j] - means[j]) ** 2).sum() for j in range(k)))
    return ClusterResult(labels, means, sizes, objective, params.backend, history)


def _cluster_mean(members, trim):
    if trim > 0 and members.shape[0] >= 3:
        return robust_mean(members, trim)
    return members.mean(axis=0)


class BandClusterer(BaseEstimator, ClusterMixin):
    """Estimator wrapper around :func:`cluster_points`.

    Parameters
    ----------
    n_clusters : int, default=2
    backend : {"kmeans_pp", "trimmed_kmeans", "single_linkage_cut"}
    restarts : int, default=20
    trim_fraction : float, default=0.05
        Used by ``trimmed_kmeans`` only.
    pca_preprocess : bool, default=True
        Cluster in the top principal subspace when ``d > 2 * n_clusters``.
    max_iters : int, default=200
    random_state : int, default=0

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
    inertia_ : float
    result_ : ClusterResult
    """

    def __init__(
        self,
        n_clusters=2,
        backend="kmeans_pp",
        restarts=20,
        trim_fraction=0.05,
        pca_preprocess=True,
        max_iters=200,
        random_state=0,
    ):
        self.n_clusters = n_clusters
        self.backend = backend
        self.restarts = restarts
        self.trim_fraction = trim_fraction
        self.pca_preprocess = pca_preprocess
        self.max_iters = max_iters
        self.random_state = random_state

    def _params(self):
        return ClusterParams(
            k=self.n_clusters,
            backend=self.backend,
            restarts=self.restarts,
            trim_fraction=self.trim_fraction,
            pca_preprocess=self.pca_preprocess,
            max_iters=self.max_iters,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.result_ = cluster_points(X, self._params())
        self.labels_ = self.result_.assignment
        self.cluster_centers_ = self.result_.means
        self.inertia_ = self.result_.objective
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(X, self.cluster_centers_).argmin(axis=1)
