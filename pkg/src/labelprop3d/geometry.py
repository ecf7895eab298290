"""Point-cloud containers, rigid transforms and voxel-grid spatial indexing.

Clouds are stored column-wise as numpy arrays rather than as collections of
point objects; :class:`LabeledPoint` is only a convenience view of one row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import ContractViolation, InvalidParameterError, InvalidPoseError

SENSOR = "sensor"
WORLD = "world"

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1
# one voxel of slack on each side so the 26 neighbours of any key stay packable
_KEY_MIN = -_KEY_OFFSET + 1
_KEY_MAX = _KEY_OFFSET - 2

# offsets of a voxel and its 26 face/edge/corner neighbours
NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


def as_point3(point) -> np.ndarray:
    """Validate a single 3D point and return it as a float64 vector."""
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if p.shape != (3,):
        raise InvalidParameterError(f"expected a 3D point, got shape {np.shape(point)}")
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError("point coordinates must be finite")
    return p


def check_positions(positions) -> np.ndarray:
    """Return an (N, 3) float64 array of finite coordinates."""
    arr = np.asarray(positions, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidParameterError(f"positions must have shape (N, 3), got {arr.shape}")
    try:
        return check_array(arr, dtype=np.float64, copy=False)
    except ValueError as exc:
        raise InvalidParameterError(f"invalid positions: {exc}") from None


def _check_cell(cell_size: float, name: str = "cell_size") -> float:
    cell = float(cell_size)
    if not np.isfinite(cell) or cell <= 0:
        raise InvalidParameterError(f"{name} must be > 0, got {cell_size!r}")
    return cell


def voxel_keys(positions, cell_size: float) -> np.ndarray:
    """Integer voxel coordinates ``floor(p / cell_size)`` per axis."""
    cell = _check_cell(cell_size)
    pts = check_positions(positions)
    return np.floor(pts / cell).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer voxel keys into sortable int64 scalars."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if keys.size and (keys.min() < _KEY_MIN - 1 or keys.max() > _KEY_MAX + 1):
        raise InvalidParameterError(
            "voxel key out of packable range; use a larger cell size or recenter the cloud")
    shifted = keys + _KEY_OFFSET
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty((packed.size, 3), dtype=np.int64)
    out[:, 0] = (packed >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (packed >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = packed & _KEY_MASK
    return out - _KEY_OFFSET


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation + translation mapping sensor coordinates into the world frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidPoseError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidPoseError("pose contains non-finite values")
        if orthonormality_error(rot) > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InvalidPoseError("rotation is not orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidPose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise InvalidPoseError(f"pose matrix must be 3x4 or 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, positions) -> np.ndarray:
        pts = check_positions(positions)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def orthonormality_error(rotation) -> float:
    r = np.asarray(rotation, dtype=np.float64)
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


class LabeledPoint(NamedTuple):
    position: np.ndarray
    features: np.ndarray
    label: int
    confidence: float
    scan_index: int


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScanCloud:
    """An ordered, immutable cloud of labeled points sharing one frame.

    ``labels`` uses -1 for unassigned points, whose confidence must be 0.
    ``ground_truth`` is optional annotation carried along for oracle backends,
    training export and evaluation; it never influences propagation.
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    confidences: np.ndarray | None = None
    scan_index: np.ndarray | int | None = None
    frame: str = SENSOR
    channels: tuple[str, ...] = ()
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(check_positions(self.positions), dtype=np.float64)
        n = len(pos)
        channels = tuple(self.channels)
        if self.features is None:
            feats = np.zeros((n, len(channels)), dtype=np.float64)
        else:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim != 2:
                feats = feats.reshape(n, -1) if n else feats.reshape(0, len(channels))
        if feats.shape[1] != len(channels):
            raise ContractViolation(
                f"{feats.shape[1]} feature columns but {len(channels)} channel names")
        labels = (np.full(n, -1, dtype=np.int64) if self.labels is None
                  else np.array(self.labels, dtype=np.int64).reshape(-1))
        conf = (np.zeros(n, dtype=np.float64) if self.confidences is None
                else np.array(self.confidences, dtype=np.float64).reshape(-1))
        if np.ndim(self.scan_index) == 0:
            idx = np.full(n, 0 if self.scan_index is None else int(self.scan_index), dtype=np.int64)
        else:
            idx = np.array(self.scan_index, dtype=np.int64).reshape(-1)
        gt = None
        if self.ground_truth is not None:
            gt = np.array(self.ground_truth, dtype=np.int64).reshape(-1)
        for name, arr in (("labels", labels), ("confidences", conf), ("scan_index", idx),
                          ("ground_truth", gt)):
            if arr is not None and len(arr) != n:
                raise ContractViolation(f"{name} has {len(arr)} entries for {n} points")
        if self.frame not in (SENSOR, WORLD):
            raise ContractViolation(f"unknown frame tag {self.frame!r}")
        if n:
            if np.any(labels < -1):
                raise ContractViolation("labels must be >= -1")
            if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
                raise ContractViolation("confidences must lie in [0, 1]")
            if np.any(conf[labels == -1] != 0):
                raise ContractViolation("unassigned points must have confidence 0")
        for name, arr in (("positions", pos), ("features", feats), ("labels", labels),
                          ("confidences", conf), ("scan_index", idx), ("ground_truth", gt)):
            object.__setattr__(self, name, None if arr is None else _readonly(arr))
        object.__setattr__(self, "channels", channels)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, channels: Sequence[str] = (), frame: str = SENSOR) -> "ScanCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, len(channels))), frame=frame,
                   channels=tuple(channels))

    def point(self, i: int) -> LabeledPoint:
        return LabeledPoint(self.positions[i], self.features[i], int(self.labels[i]),
                            float(self.confidences[i]), int(self.scan_index[i]))

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.features[:, self.channels.index(name)]
        except ValueError:
            raise KeyError(f"cloud has no {name!r} channel (has {self.channels})") from None

    def subset(self, selector) -> "ScanCloud":
        """Rows selected by a boolean mask or an index array, order preserved."""
        sel = np.asarray(selector)
        if sel.dtype != bool:
            sel = sel.astype(np.int64)
        gt = None if self.ground_truth is None else self.ground_truth[sel]
        return ScanCloud(self.positions[sel], self.features[sel], self.labels[sel],
                         self.confidences[sel], self.scan_index[sel], self.frame,
                         self.channels, gt)

    def replace(self, **changes) -> "ScanCloud":
        fields = dict(positions=self.positions, features=self.features, labels=self.labels,
                      confidences=self.confidences, scan_index=self.scan_index,
                      frame=self.frame, channels=self.channels,
                      ground_truth=self.ground_truth)
        fields.update(changes)
        return ScanCloud(**fields)

    def with_labels(self, labels, confidences) -> "ScanCloud":
        return self.replace(labels=labels, confidences=confidences)

    @staticmethod
    def concatenate(clouds: Sequence["ScanCloud"]) -> "ScanCloud":
        clouds = list(clouds)
        if not clouds:
            return ScanCloud.empty()
        frames = {c.frame for c in clouds}
        channels = {c.channels for c in clouds}
        if len(frames) != 1 or len(channels) != 1:
            raise ContractViolation("cannot concatenate clouds with different frames or channels")
        has_gt = [c.ground_truth is not None for c in clouds]
        gt = (np.concatenate([c.ground_truth for c in clouds]) if all(has_gt) else None)
        return ScanCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.features for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            np.concatenate([c.confidences for c in clouds]),
            np.concatenate([c.scan_index for c in clouds]),
            clouds[0].frame, clouds[0].channels, gt,
        )


def transform_cloud(cloud: ScanCloud, pose: RigidPose) -> ScanCloud:
    """Register a sensor-frame cloud into the world frame."""
    if cloud.frame != SENSOR:
        raise ContractViolation("transform_cloud expects a sensor-frame cloud")
    if not isinstance(pose, RigidPose):
        pose = RigidPose.from_matrix(pose)
    return cloud.replace(positions=pose.apply(cloud.positions), frame=WORLD)


def first_per_voxel(positions, cell_size: float) -> np.ndarray:
    """Indices of the first point (in input order) occupying each voxel, ascending."""
    pts = check_positions(positions)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    packed = pack_keys(voxel_keys(pts, cell_size))
    _, first = np.unique(packed, return_index=True)
    return np.sort(first)


def voxel_subsample(cloud: ScanCloud, cell_size: float) -> ScanCloud:
    """Keep one point per voxel: the first occupant in input order."""
    _check_cell(cell_size)
    return cloud.subset(first_per_voxel(cloud.positions, cell_size))


def range_crop(cloud: ScanCloud, center, max_range: float) -> ScanCloud:
    """Keep points within the closed ball of radius ``max_range`` around ``center``."""
    r = _check_cell(max_range, "max_range")
    c = as_point3(center)
    d2 = np.sum((cloud.positions - c) ** 2, axis=1)
    return cloud.subset(d2 <= r * r)


class VoxelIndex:
    """Uniform-grid spatial hash answering exact fixed-radius queries.

    Points are bucketed by ``floor(p / cell_size)``. A query scans the
    query's voxel and its 26 neighbours, which is exhaustive as long as the
    radius does not exceed the cell size.
    """

    def __init__(self, positions, cell_size: float):
        self.cell_size = _check_cell(cell_size)
        self.positions = check_positions(positions).copy()
        self.positions.setflags(write=False)
        keys = voxel_keys(self.positions, self.cell_size)
        if len(keys) and (keys.min() < _KEY_MIN or keys.max() > _KEY_MAX):
            raise InvalidParameterError("cloud extent too large for the voxel key range")
        packed = pack_keys(keys)
        self._order = np.argsort(packed, kind="stable")
        self._sorted = packed[self._order]
        self._cells = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        """Mapping voxel key -> ascending point indices (built lazily)."""
        if self._cells is None:
            uniq, start = np.unique(self._sorted, return_index=True)
            bounds = np.append(start, len(self._sorted))
            keys = unpack_keys(uniq)
            self._cells = {tuple(int(v) for v in k): np.sort(self._order[bounds[i]:bounds[i + 1]])
                           for i, k in enumerate(keys)}
        return self._cells

    def key_of(self, point) -> tuple[int, int, int]:
        k = np.floor(as_point3(point) / self.cell_size).astype(np.int64)
        return tuple(int(v) for v in k)

    def _check_radius(self, radius: float) -> float:
        r = float(radius)
        if not np.isfinite(r) or r <= 0:
            raise InvalidParameterError(f"radius must be > 0, got {radius!r}")
        if r > self.cell_size:
            raise InvalidParameterError(
                f"radius {r} exceeds cell size {self.cell_size}; the 27-voxel scan would be inexact")
        return r

    def candidates(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """All (query, point) pairs sharing a 27-voxel neighbourhood."""
        q = check_positions(queries)
        if len(q) == 0 or len(self) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        qkeys = np.floor(q / self.cell_size).astype(np.int64)
        qkeys = np.clip(qkeys, _KEY_MIN, _KEY_MAX)
        nkeys = (qkeys[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)
        packed = pack_keys(nkeys)
        lo = np.searchsorted(self._sorted, packed, side="left")
        hi = np.searchsorted(self._sorted, packed, side="right")
        counts = hi - lo
        total = int(counts.sum())
        qidx = np.repeat(np.arange(len(q), dtype=np.int64).repeat(len(NEIGHBOR_OFFSETS)), counts)
        offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        ridx = self._order[np.repeat(lo, counts) + offsets]
        return qidx, ridx

    def query_many(self, queries, radius: float, chunk_size: int = 4096):
        """Vectorised radius search.

        Returns ``(query_idx, point_idx, distance)`` arrays holding every pair
        with distance <= radius, sorted by query then point index.
        """
        r = self._check_radius(radius)
        q = check_positions(queries)
        out_q, out_r, out_d = [], [], []
        for start in range(0, len(q), chunk_size):
            chunk = q[start:start + chunk_size]
            qi, ri = self.candidates(chunk)
            d = np.sqrt(np.sum((self.positions[ri] - chunk[qi]) ** 2, axis=1))
            keep = d <= r
            out_q.append(qi[keep] + start)
            out_r.append(ri[keep])
            out_d.append(d[keep])
        if not out_q:
            return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        qi, ri, d = np.concatenate(out_q), np.concatenate(out_r), np.concatenate(out_d)
        order = np.lexsort((ri, qi))
        return qi[order], ri[order], d[order]

    def query(self, point, radius: float) -> list[tuple[int, float]]:
        _, ri, d = self.query_many(as_point3(point)[None, :], radius)
        return [(int(i), float(x)) for i, x in zip(ri, d)]


def build_voxel_index(cloud, cell_size: float) -> VoxelIndex:
    positions = cloud.positions if isinstance(cloud, ScanCloud) else cloud
    return VoxelIndex(positions, cell_size)


def radius_neighbors(index: VoxelIndex, query, radius: float) -> list[tuple[int, float]]:
    return index.query(query, radius)


class VoxelSubsampler(TransformerMixin, BaseEstimator):
    """First-occupant voxel-grid subsampling as a scikit-learn transformer.

    Operates on raw (N, 3) coordinate arrays; use :func:`voxel_subsample`
    for :class:`ScanCloud` inputs.
    """

    def __init__(self, cell_size=0.05):
        self.cell_size = cell_size

    def fit(self, X, y=None):
        _check_cell(self.cell_size)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        X = check_positions(X)
        return X[first_per_voxel(X, self.cell_size)]
