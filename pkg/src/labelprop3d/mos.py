"""Moving object segmentation variant of the pipeline.

Binary MOS separates static from moving points; semantic MOS keeps the
semantic classes and adds a moving variant of each movable class. Only
moving classes are treated as dynamic, so parked vehicles propagate like
any other static structure and few residual points remain.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .backends import TIMESTAMP, ClusterBatch
from .errors import ContractViolation, InvalidParameterError, LabelMappingError
from .propagation import DATA_DIR, LabelPartition

BINARY = "binary"
SEMANTIC = "semantic"
STATIC_ID, MOVING_ID = 1, 2


@dataclass(frozen=True)
class MosConfig:
    mode: str = SEMANTIC
    n_clusters: int = 5
    timestamp_feature: bool = True
    # smaller context neighbourhoods than semantic segmentation; 1 m is our choice
    densify_voxel: float = 1.0
    mapping: str = "mos_semantickitti"

    def __post_init__(self):
        if self.mode not in (BINARY, SEMANTIC):
            raise InvalidParameterError(f"mode must be 'binary' or 'semantic', got {self.mode!r}")
        if int(self.n_clusters) < 1:
            raise InvalidParameterError("n_clusters must be >= 1")
        if not self.densify_voxel > 0:
            raise InvalidParameterError("densify_voxel must be > 0")


def attach_timestamp_feature(batch: ClusterBatch) -> ClusterBatch:
    """Append the +1 (current scan) / -1 (older scans) timestamp channel."""
    if TIMESTAMP in batch.channels:
        raise ContractViolation("batch already carries a timestamp channel")
    return replace(batch, channels=batch.channels + (TIMESTAMP,))


@dataclass(frozen=True)
class MosMapping:
    classes: tuple[str, ...]
    moving: frozenset[int]
    raw_map: dict

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def partition(self, mode: str) -> LabelPartition:
        if mode == BINARY:
            return LabelPartition.from_dynamic(2, {MOVING_ID}, ("static", "moving"))
        return LabelPartition.from_dynamic(self.num_classes, self.moving, self.classes)

    def from_raw(self, raw_labels) -> np.ndarray:
        """Dataset raw ids to semantic-MOS ids (0 for unlabeled)."""
        raw = np.asarray(raw_labels, dtype=np.int64)
        lut_keys = np.array(sorted(self.raw_map), dtype=np.int64)
        lut_vals = np.array([self.raw_map[k] for k in lut_keys], dtype=np.int64)
        pos = np.searchsorted(lut_keys, raw)
        pos = np.clip(pos, 0, len(lut_keys) - 1)
        bad = lut_keys[pos] != raw
        if np.any(bad):
            raise LabelMappingError(f"raw ids {sorted(set(raw[bad].tolist()))} are not declared")
        return lut_vals[pos]


def load_mos_mapping(name_or_path="mos_semantickitti") -> MosMapping:
    path = Path(name_or_path)
    if not path.exists():
        path = DATA_DIR / f"{name_or_path}.yaml"
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    classes = tuple(doc["classes"])
    moving = frozenset(classes.index(c) + 1 for c in doc["moving"])
    raw_map = {int(k): (0 if v is None else classes.index(v) + 1)
               for k, v in doc.get("raw_map", {}).items()}
    return MosMapping(classes, moving, raw_map)


def mos_label_mapping(labels, mode: str, mapping: MosMapping | None = None) -> np.ndarray:
    """Map semantic-MOS ids to the requested MOS label space.

    ``binary`` gives 1 (static) / 2 (moving); ``semantic`` is the identity.
    Id 0 (unlabeled) is preserved in both modes.
    """
    mapping = mapping or load_mos_mapping()
    lab = np.asarray(labels, dtype=np.int64)
    if np.any((lab < 0) | (lab > mapping.num_classes)):
        bad = sorted(set(lab[(lab < 0) | (lab > mapping.num_classes)].tolist()))
        raise LabelMappingError(f"class ids {bad} are not declared by the MOS mapping")
    if mode == SEMANTIC:
        return lab.copy()
    if mode != BINARY:
        raise InvalidParameterError(f"unknown MOS mode {mode!r}")
    out = np.where(np.isin(lab, list(mapping.moving)), MOVING_ID, STATIC_ID)
    out[lab == 0] = 0
    return out
