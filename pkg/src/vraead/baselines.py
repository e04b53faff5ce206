"""Classical comparison detectors: k-NN distance, PCA residual and histogram scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autograd import ContractError
from .preprocess import HistogramModel, hbos_fit, hbos_score, top_fraction


@dataclass
class KnnModel:
    points: np.ndarray
    k: int = 5

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if not 1 <= self.k < len(self.points):
            raise ContractError(f"k={self.k} must satisfy 1 <= k < N={len(self.points)}")
        self._tree = cKDTree(self.points)

    def score(self, queries: np.ndarray, workers: int = 1) -> np.ndarray:
        """Euclidean distance to the k-th nearest training point (exact)."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1 and self.points.shape[1] > 1
        q = q.reshape(-1, self.points.shape[1])
        dist, _ = self._tree.query(q, k=self.k, workers=workers)
        out = dist if self.k == 1 else dist[:, -1]
        return out[0] if single else out


def knn_fit(points: np.ndarray, k: int = 5) -> KnnModel:
    return KnnModel(points, k)


def knn_score(model: KnnModel, points: np.ndarray) -> np.ndarray:
    return model.score(points)


@dataclass
class PcaModel:
    mean: np.ndarray
    axes: np.ndarray        # (d, m), orthonormal columns
    explained: np.ndarray   # eigenvalues of the kept axes

    @property
    def m(self) -> int:
        return self.axes.shape[1]

    def project(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.axes

    def score(self, points: np.ndarray) -> np.ndarray:
        """Norm of the component orthogonal to the kept principal subspace."""
        centred = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.mean
        resid = centred - (centred @ self.axes) @ self.axes.T
        return np.linalg.norm(resid, axis=1)


def pca_fit(points: np.ndarray, m: int | None = None, variance: float = 0.9) -> PcaModel:
    """Top-m eigenvectors of the sample covariance.

    With ``m=None`` the smallest m explaining ``variance`` of the total is
    used, capped at d - 1 so a residual remains.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N, d = X.shape
    if m is not None and (m > d or N <= m):
        raise ContractError(f"pca_fit needs m <= d and N > m (m={m}, d={d}, N={N})")
    mean = X.mean(axis=0)
    live = X.std(axis=0) > 0
    dl = int(live.sum())
    # eigen-decompose the non-constant dims; constant dims carry no loading
    evals = np.zeros(d)
    evecs = np.zeros((d, d))
    if dl:
        cov = np.cov(X[:, live] - mean[live], rowvar=False).reshape(dl, dl)
        ev, vec = np.linalg.eigh(cov)
        order = np.argsort(ev)[::-1]
        evals[:dl] = np.clip(ev[order], 0.0, None)
        evecs[np.ix_(live, np.arange(dl))] = vec[:, order]
    # remaining axes (only reached if m exceeds the live rank) span the constant dims
    for j, dim in enumerate(np.flatnonzero(~live)):
        evecs[dim, dl + j] = 1.0
    if m is None:
        total = evals.sum()
        frac = np.cumsum(evals) / total if total > 0 else np.ones(d)
        m = int(np.searchsorted(frac, variance - 1e-12) + 1)
        m = max(1, min(m, d - 1))
    return PcaModel(mean, evecs[:, :m].copy(), evals[:m].copy())


def pca_score(model: PcaModel, points: np.ndarray) -> np.ndarray:
    return model.score(points)


def baseline_detect(scores, contamination: float) -> np.ndarray:
    """Flag the ceil(contamination * N) highest scores (ties to the earlier index)."""
    if not 0 < contamination < 1:
        raise ValueError(f"contamination must lie in (0, 1), got {contamination}")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.zeros(len(scores), dtype=bool)
    flags[top_fraction(scores, contamination)] = True
    return flags


@dataclass
class HbosDetector:
    k: int = 10
    model: HistogramModel | None = None

    def fit(self, points: np.ndarray) -> "HbosDetector":
        self.model = hbos_fit(points, self.k)
        return self

    def score(self, points: np.ndarray) -> np.ndarray:
        return hbos_score(self.model, points)


def default_knn_k(n: int) -> int:
    return min(5, max(1, n - 1))

