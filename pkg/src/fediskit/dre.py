"""Density-ratio estimators for ID/OOD proxy filtering.

Two estimators share one thresholding interface: the centroid-distance
estimator (nearest-centroid Euclidean distance, ID when *below* threshold)
and the kernel least-squares estimator (density-ratio value, ID when *above*
threshold).  Models are immutable after fitting; scoring is read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionMismatchError, InfeasibleError, SolverError

BELOW_IS_ID = "below_is_id"
ABOVE_IS_ID = "above_is_id"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CentroidModel:
    """Cluster centroids fit on private data; score = distance to nearest."""

    centroids: np.ndarray  # (c, d)
    num_clusters: int
    inertia: float
    iterations_used: int
    inertia_history: tuple[float, ...]  # one entry per Lloyd iteration + final


@dataclass(frozen=True, eq=False)
class KulsifModel:
    """Kernel least-squares importance-fitting model.

    Scores estimate the density ratio of the private distribution over the
    auxiliary one: high values mean the point looks like private data.
    """

    private_samples: np.ndarray  # (n, d)
    aux_samples: np.ndarray      # (m, d)
    alpha: np.ndarray            # (m,)
    lam: float
    sigma: float


@dataclass(frozen=True)
class IdThreshold:
    """Decision threshold for ID/OOD classification.

    ``calibration_quantile`` is None when the threshold was supplied raw
    rather than calibrated from private-data scores.
    """

    value: float
    direction: str
    calibration_quantile: float | None = None

    def __post_init__(self):
        if self.direction not in (BELOW_IS_ID, ABOVE_IS_ID):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.isfinite(self.value):
            raise ValueError("threshold value must be finite")
        if self.calibration_quantile is not None and not 0 < self.calibration_quantile < 1:
            raise ValueError("calibration quantile must be in (0, 1)")


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {X.shape}")
    return X


def _kmeans_pp_init(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((c, X.shape[1]))
    centroids[0] = X[int(rng.integers(n))]
    closest_sq = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, c):
        total = closest_sq.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest_sq / total))
        centroids[j] = X[pick]
        closest_sq = np.minimum(closest_sq, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(X, c: int, max_iters: int = 100, tol: float = 1e-6,
               seed: int = 0) -> CentroidModel:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Stops when the largest centroid movement drops below ``tol`` or after
    ``max_iters`` iterations.  An emptied cluster is re-seeded to the point
    currently farthest from its assigned centroid.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    if not 1 <= c <= n:
        raise InfeasibleError(f"need 1 <= clusters <= {n} samples, got {c}")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(X, c, rng)
    history = []
    iterations = 0
    for _ in range(max_iters):
        dist = cdist(X, centroids)
        assign = dist.argmin(axis=1)
        nearest = dist[np.arange(n), assign]
        history.append(float((nearest ** 2).sum()))
        new_centroids = centroids.copy()
        for j in range(c):
            members = assign == j
            if members.any():
                new_centroids[j] = X[members].mean(axis=0)
        empty = [j for j in range(c) if not (assign == j).any()]
        if empty:
            farness = nearest.copy()
            for j in empty:
                pick = int(farness.argmax())
                new_centroids[j] = X[pick]
                farness[pick] = -1.0
        movement = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        iterations += 1
        if movement < tol:
            break
    final_inertia = float((cdist(X, centroids).min(axis=1) ** 2).sum())
    history.append(final_inertia)
    return CentroidModel(
        centroids=_frozen(centroids),
        num_clusters=c,
        inertia=final_inertia,
        iterations_used=iterations,
        inertia_history=tuple(history),
    )


def kmeans_score_batch(model: CentroidModel, X) -> np.ndarray:
    """Distance from each row of X to its nearest centroid."""
    X = _as_matrix(X)
    if X.shape[1] != model.centroids.shape[1]:
        raise DimensionMismatchError(
            f"sample dim {X.shape[1]} != centroid dim {model.centroids.shape[1]}")
    return cdist(X, model.centroids).min(axis=1)


def kmeans_score(model: CentroidModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("kmeans_score expects a single vector")
    return float(kmeans_score_batch(model, x[None, :])[0])


def _gaussian_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    # exp(-||a-b||^2 / (2 sigma^2)), computed in place to keep the peak
    # allocation at one (len(A), len(B)) matrix.
    D = cdist(A, B, "sqeuclidean")
    np.divide(D, -2.0 * sigma * sigma, out=D)
    np.exp(D, out=D)
    return D


def gen_auxiliary(X, m: int, seed: int, margin: float = 0.1) -> np.ndarray:
    """Uniform samples over the data's bounding box expanded by ``margin`` per side."""
    X = _as_matrix(X)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    rng = np.random.default_rng(seed)
    return rng.uniform(lo - margin * span, hi + margin * span, size=(m, X.shape[1]))


def median_heuristic_sigma(X, max_points: int = 500, seed: int = 0) -> float:
    """Median pairwise distance over a subsample; the usual kernel-width default."""
    X = _as_matrix(X)
    if X.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        X = X[rng.choice(X.shape[0], size=max_points, replace=False)]
    if X.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def kulsif_learn(private, aux, sigma: float, lam: float) -> KulsifModel:
    """Fit the kernel least-squares importance estimator.

    Builds K11[i, j] = k(aux_i, aux_j) and K12[i, j] = k(priv_i, aux_j) with a
    Gaussian kernel of width sigma, then solves the regularized system

        (K11 / m + lam * I) alpha = -K12^T 1_n / (lam * n * m).
    """
    private = _as_matrix(private)
    aux = _as_matrix(aux)
    if private.shape[1] != aux.shape[1]:
        raise DimensionMismatchError("private/aux dimensionality mismatch")
    if sigma <= 0 or lam <= 0:
        raise ValueError("sigma and lam must be positive")
    n, m = private.shape[0], aux.shape[0]
    if n < 1 or m < 1:
        raise ValueError("need at least one private and one auxiliary sample")
    K11 = _gaussian_kernel(aux, aux, sigma)
    K12 = _gaussian_kernel(private, aux, sigma)
    A = K11 / m
    A[np.diag_indices_from(A)] += lam
    b = -K12.sum(axis=0) / (lam * n * m)
    try:
        alpha = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"regularized kernel system is singular: {exc}") from exc
    if not np.all(np.isfinite(alpha)):
        raise SolverError("alpha vector is not finite; increase lam")
    return KulsifModel(
        private_samples=_frozen(private.copy()),
        aux_samples=_frozen(aux.copy()),
        alpha=_frozen(alpha),
        lam=float(lam),
        sigma=float(sigma),
    )


def kulsif_score_batch(model: KulsifModel, X) -> np.ndarray:
    """Density-ratio estimate w(x) for each row of X."""
    X = _as_matrix(X)
    if X.shape[1] != model.aux_samples.shape[1]:
        raise DimensionMismatchError(
            f"sample dim {X.shape[1]} != model dim {model.aux_samples.shape[1]}")
    aux_term = _gaussian_kernel(X, model.aux_samples, model.sigma) @ model.alpha
    n = model.private_samples.shape[0]
    priv_term = _gaussian_kernel(X, model.private_samples, model.sigma).sum(axis=1)
    return aux_term + priv_term / (model.lam * n)


def kulsif_score(model: KulsifModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("kulsif_score expects a single vector")
    return float(kulsif_score_batch(model, x[None, :])[0])


def score_batch(model, X) -> np.ndarray:
    """Score rows of X under either estimator type."""
    if isinstance(model, CentroidModel):
        return kmeans_score_batch(model, X)
    if isinstance(model, KulsifModel):
        return kulsif_score_batch(model, X)
    raise TypeError(f"unknown estimator type {type(model).__name__}")


def model_direction(model) -> str:
    """ID side of the threshold for a given estimator type."""
    if isinstance(model, CentroidModel):
        return BELOW_IS_ID
    if isinstance(model, KulsifModel):
        return ABOVE_IS_ID
    raise TypeError(f"unknown estimator type {type(model).__name__}")


def calibrate_threshold(scores, quantile: float, direction: str) -> IdThreshold:
    """Nearest-rank quantile of private-point scores.

    below_is_id keeps the ``quantile`` lowest scores ID; above_is_id keeps the
    ``quantile`` highest (i.e. takes the (1 - quantile) rank).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot calibrate a threshold from zero scores")
    if not 0 < quantile < 1:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    if direction not in (BELOW_IS_ID, ABOVE_IS_ID):
        raise ValueError(f"unknown direction {direction!r}")
    level = quantile if direction == BELOW_IS_ID else 1.0 - quantile
    ordered = np.sort(scores)
    # tiny slack so 1 - q float error cannot bump the rank up a step
    rank = min(max(int(np.ceil(level * scores.size - 1e-9)), 1), scores.size)
    return IdThreshold(float(ordered[rank - 1]), direction, quantile)


def is_id(score: float, threshold: IdThreshold) -> bool:
    """Equality counts as ID for both directions."""
    if threshold.direction == BELOW_IS_ID:
        return bool(score <= threshold.value)
    return bool(score >= threshold.value)


def is_id_batch(scores: np.ndarray, threshold: IdThreshold) -> np.ndarray:
    if threshold.direction == BELOW_IS_ID:
        return scores <= threshold.value
    return scores >= threshold.value
