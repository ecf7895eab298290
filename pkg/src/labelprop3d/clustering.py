"""K-means partition of residual points into a fixed number of clusters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidParameterError
from .geometry import ScanCloud, check_positions


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    centers: np.ndarray
    assignment: np.ndarray
    n_iter: int = 0
    inertia_history: tuple[float, ...] = ()

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def _assign(points, centers):
    d2 = _sq_dists(points, centers)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def _update(points, labels, d2, centers):
    new = centers.copy()
    counts = np.bincount(labels, minlength=len(centers))
    for dim in range(3):
        sums = np.bincount(labels, weights=points[:, dim], minlength=len(centers))
        nonempty = counts > 0
        new[nonempty, dim] = sums[nonempty] / counts[nonempty]
    empty = np.nonzero(counts == 0)[0]
    if len(empty):
        far = d2.copy()
        for c in empty:
            j = int(np.argmax(far))
            new[c] = points[j]
            far[j] = -1.0
    return new


def kmeans(points, n_clusters: int, max_iter: int = 50, seed=0) -> ClusterAssignment:
    """Lloyd's algorithm with seeded k-means++ initialisation.

    Fewer points than ``n_clusters`` lowers the cluster count to the point
    count. Empty clusters are re-seeded at the point farthest from its own
    center. Ties in the assignment go to the lowest center id.
    """
    if int(n_clusters) < 1:
        raise InvalidParameterError(f"n_clusters must be >= 1, got {n_clusters}")
    if int(max_iter) < 1:
        raise InvalidParameterError(f"max_iter must be >= 1, got {max_iter}")
    pts = check_positions(points)
    if len(pts) == 0:
        return ClusterAssignment(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    k = min(int(n_clusters), len(pts))
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(pts, k, rng)
    labels, d2 = _assign(pts, centers)
    history = [float(d2.sum())]
    n_iter = 0
    for n_iter in range(1, int(max_iter) + 1):
        centers = _update(pts, labels, d2, centers)
        new_labels, d2 = _assign(pts, centers)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    else:
        # stopped on the iteration cap: make centers the means of the final groups
        counts = np.bincount(labels, minlength=k)
        for dim in range(3):
            sums = np.bincount(labels, weights=pts[:, dim], minlength=k)
            centers[counts > 0, dim] = sums[counts > 0] / counts[counts > 0]
    return ClusterAssignment(centers, labels.astype(np.int64), n_iter, tuple(history))


class ResidualKMeans(ClusterMixin, BaseEstimator):
    """scikit-learn facade over :func:`kmeans` for (N, 3) coordinates."""

    def __init__(self, n_clusters=20, max_iter=50, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        result = kmeans(X, self.n_clusters, self.max_iter, self.random_state)
        self.cluster_centers_ = result.centers
        self.labels_ = result.assignment
        self.n_iter_ = result.n_iter
        self.inertia_ = result.inertia
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        pts = check_positions(X)
        if len(pts) == 0:
            return np.zeros(0, dtype=np.int64)
        return _assign(pts, self.cluster_centers_)[0]


@dataclass(eq=False)
class Cluster:
    """Residual seed points of one scan plus their densification context.

    ``context_scan_indices`` gives, for context points taken from the scan
    being segmented, their index in that scan; reference points carry -1.
    """

    seed_indices: np.ndarray
    seed_points: ScanCloud
    context_points: ScanCloud | None = None
    context_scan_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scan_id: int = 0
    cluster_id: int = 0

    def __post_init__(self):
        self.seed_indices = np.asarray(self.seed_indices, dtype=np.int64)
        if self.context_points is None:
            self.context_points = ScanCloud.empty(self.seed_points.channels, self.seed_points.frame)
        self.context_scan_indices = np.asarray(self.context_scan_indices, dtype=np.int64)
        if len(self.context_scan_indices) != len(self.context_points):
            self.context_scan_indices = np.full(len(self.context_points), -1, dtype=np.int64)

    @property
    def points(self) -> ScanCloud:
        """Seeds followed by context, the order used for every prediction."""
        if not len(self.context_points):
            return self.seed_points
        return ScanCloud.concatenate([self.seed_points, self.context_points])

    def __len__(self) -> int:
        return len(self.seed_points) + len(self.context_points)

    @property
    def n_seeds(self) -> int:
        return len(self.seed_points)


def extract_residual_clusters(scan: ScanCloud, residual_mask, n_clusters: int,
                              max_iter: int = 50, seed=0, scan_id: int | None = None) -> list[Cluster]:
    """Group the residual points of ``scan`` into at most ``n_clusters`` clusters."""
    residual = np.nonzero(np.asarray(residual_mask, dtype=bool))[0]
    if len(residual) == 0:
        return []
    if scan_id is None:
        scan_id = int(scan.scan_index[residual[0]])
    result = kmeans(scan.positions[residual], n_clusters, max_iter, seed)
    clusters = []
    for c in range(result.n_clusters):
        members = residual[result.assignment == c]
        if len(members):
            clusters.append(Cluster(members, scan.subset(members), scan_id=scan_id,
                                    cluster_id=len(clusters)))
    return clusters
