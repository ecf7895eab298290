"""Geometric propagation of static labels from the reference cloud.

Each new point collects votes from reference neighbours. A neighbour's vote
weight is a Gaussian kernel on the distance, scaled by the neighbour's
confidence; votes at or below the threshold are discarded. Surviving votes
are summed per class. A point keeps the winning class only if that class is
static, otherwise it stays residual for the learned backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .accumulation import ReferenceCloud
from .errors import ContractViolation, InvalidParameterError
from .geometry import WORLD, ScanCloud, VoxelIndex, as_point3

DATA_DIR = Path(__file__).parent / "data"


def kernel_weight(p, q, confidence: float, d_p: float) -> float:
    """Vote weight ``exp(-|p - q|^2 / d_p^2) * confidence``."""
    if not 0.0 <= confidence <= 1.0:
        raise InvalidParameterError(f"confidence must lie in [0, 1], got {confidence}")
    if not d_p > 0:
        raise InvalidParameterError(f"d_p must be > 0, got {d_p}")
    diff = as_point3(p) - as_point3(q)
    return math.exp(-float(diff @ diff) / (d_p * d_p)) * confidence


def effective_radius(d_p: float, threshold: float) -> float:
    """Distance beyond which even a confidence-1 vote cannot pass ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise InvalidParameterError(f"threshold must lie in (0, 1), got {threshold}")
    if not d_p > 0:
        raise InvalidParameterError(f"d_p must be > 0, got {d_p}")
    return d_p * math.sqrt(math.log(1.0 / threshold))


@dataclass(frozen=True)
class LabelPartition:
    """Split of the class ids 1..K into dynamic and static subsets."""

    num_classes: int
    dynamic_ids: frozenset[int]
    static_ids: frozenset[int]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        dyn, sta = frozenset(map(int, self.dynamic_ids)), frozenset(map(int, self.static_ids))
        object.__setattr__(self, "dynamic_ids", dyn)
        object.__setattr__(self, "static_ids", sta)
        if dyn & sta:
            raise InvalidParameterError(f"classes {sorted(dyn & sta)} are both static and dynamic")
        if dyn | sta != set(range(1, self.num_classes + 1)):
            raise InvalidParameterError("dynamic and static ids must cover exactly 1..K")
        if self.names and len(self.names) != self.num_classes:
            raise InvalidParameterError("one name per class is required")

    @classmethod
    def from_dynamic(cls, num_classes: int, dynamic_ids, names=()) -> "LabelPartition":
        dyn = frozenset(dynamic_ids)
        return cls(num_classes, dyn, frozenset(range(1, num_classes + 1)) - dyn, tuple(names))

    @property
    def static_mask(self) -> np.ndarray:
        """Boolean lookup indexed by class id (index 0 is unused)."""
        mask = np.zeros(self.num_classes + 1, dtype=bool)
        mask[sorted(self.static_ids)] = True
        return mask

    def name_of(self, class_id: int) -> str:
        return self.names[class_id - 1] if self.names else str(class_id)


def load_partition(name_or_path) -> LabelPartition:
    """Load a partition from a bundled name (``semantickitti``) or a YAML file.

    The file lists ``classes`` (names of ids 1..K in order) and ``dynamic``
    (class names or ids).
    """
    path = Path(name_or_path)
    if not path.exists():
        path = DATA_DIR / f"{name_or_path}.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no partition file or bundled partition named {name_or_path!r}")
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if "partition" in doc:
        doc = doc["partition"]
    names = list(doc["classes"])
    dynamic = {names.index(d) + 1 if isinstance(d, str) else int(d) for d in doc["dynamic"]}
    return LabelPartition.from_dynamic(len(names), dynamic, names)


@dataclass(frozen=True)
class PropagationParams:
    d_p: float = 0.30
    vote_threshold: float = 0.5
    index_cell: float = 0.80

    def __post_init__(self):
        radius = effective_radius(self.d_p, self.vote_threshold)
        if radius > self.index_cell:
            raise InvalidParameterError(
                f"effective radius {radius:.4f} m exceeds the index cell {self.index_cell} m")

    @property
    def radius(self) -> float:
        return effective_radius(self.d_p, self.vote_threshold)


@dataclass(frozen=True, eq=False)
class PropagationResult:
    labels: np.ndarray
    confidences: np.ndarray

    @property
    def residual_mask(self) -> np.ndarray:
        return self.labels == -1

    @property
    def propagated_fraction(self) -> float:
        n = len(self.labels)
        return float(np.count_nonzero(self.labels != -1)) / n if n else 0.0


def vote(positions, ref_positions, ref_labels, ref_confidences, pairs, partition,
         params: PropagationParams) -> PropagationResult:
    """Resolve votes for candidate (query, reference) neighbour pairs.

    ``pairs`` is ``(query_idx, ref_idx, distance)``; it only needs to contain
    every pair within the effective radius, extra pairs are harmless.
    """
    m = len(positions)
    k = partition.num_classes
    labels = np.full(m, -1, dtype=np.int64)
    conf = np.zeros(m, dtype=np.float64)
    qi, ri, dist = pairs
    if m == 0 or len(qi) == 0:
        return PropagationResult(labels, conf)
    ref_labels = np.asarray(ref_labels)
    if np.any(ref_labels[ri] < 1) or np.any(ref_labels[ri] > k):
        raise ContractViolation("reference labels must lie in 1..K of the partition")
    w = np.exp(-(dist * dist) / (params.d_p * params.d_p)) * np.asarray(ref_confidences)[ri]
    keep = w > params.vote_threshold
    qi, cls, w = qi[keep], ref_labels[ri][keep], w[keep]
    bins = np.bincount(qi * (k + 1) + cls, weights=w, minlength=m * (k + 1)).reshape(m, k + 1)
    total = bins.sum(axis=1)
    has_votes = total > 0
    # argmax returns the first maximum, i.e. the smallest class id on ties
    winner = np.argmax(bins, axis=1)
    assign = has_votes & partition.static_mask[winner]
    labels[assign] = winner[assign]
    rows = np.nonzero(assign)[0]
    conf[assign] = np.clip(bins[rows, winner[rows]] / total[rows], 0.0, 1.0)
    return PropagationResult(labels, conf)


def propagate_labels(ref: ReferenceCloud | ScanCloud, scan: ScanCloud,
                     partition: LabelPartition,
                     params: PropagationParams | None = None) -> PropagationResult:
    """Label scan points from reference votes; dynamic winners stay residual."""
    params = params or PropagationParams()
    if scan.frame != WORLD:
        raise ContractViolation("scan must be registered into the world frame")
    if isinstance(ref, ReferenceCloud):
        ref_cloud = ref.cloud
        index = ref.index if ref.index_cell == params.index_cell else None
    else:
        ref_cloud, index = ref, None
    if len(ref_cloud) and ref_cloud.frame != WORLD:
        raise ContractViolation("reference cloud must be in the world frame")
    if len(ref_cloud) == 0 or len(scan) == 0:
        return vote(scan.positions, None, None, None, (np.zeros(0, dtype=np.int64),) * 3,
                    partition, params)
    if index is None:
        index = VoxelIndex(ref_cloud.positions, params.index_cell)
    pairs = index.query_many(scan.positions, params.radius)
    return vote(scan.positions, ref_cloud.positions, ref_cloud.labels, ref_cloud.confidences,
                pairs, partition, params)
