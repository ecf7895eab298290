"""Context enrichment of residual clusters with coarse voxel neighbourhoods.

Every coarse voxel touched by a seed is split into 3x3x3 sub-voxels. A seed
in sub-voxel offset ``o`` (each axis in {-1, 0, 1}) pulls in the coarse
voxels ``key + o * b`` for ``b`` in {0, 1}^3: its own voxel, plus the face,
edge and corner neighbours that the sub-voxel actually borders.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .clustering import Cluster
from .errors import InvalidParameterError
from .geometry import ScanCloud, check_positions, pack_keys, unpack_keys

SUBDIVISION = 3
_MASKS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


@dataclass(frozen=True)
class DensificationParams:
    voxel_size: float = 2.0

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise InvalidParameterError(f"voxel_size must be > 0, got {self.voxel_size}")

    @property
    def subdivision(self) -> int:
        return SUBDIVISION


def subvoxel_offsets(positions, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Coarse voxel keys and sub-voxel offsets in {-1, 0, 1} per axis."""
    pts = check_positions(positions)
    scaled = pts / voxel_size
    keys = np.floor(scaled).astype(np.int64)
    sub = np.floor((scaled - keys) * SUBDIVISION).astype(np.int64)
    np.clip(sub, 0, SUBDIVISION - 1, out=sub)
    return keys, sub - 1


def neighborhood_offsets(offset) -> np.ndarray:
    """Coarse-voxel offsets selected by one sub-voxel (own voxel included)."""
    o = np.asarray(offset, dtype=np.int64).reshape(1, 3)
    return np.unique(o * _MASKS, axis=0)


def selected_voxels(seed_positions, voxel_size: float) -> np.ndarray:
    """Sorted packed keys of the coarse voxels making up a cluster's context region."""
    keys, offs = subvoxel_offsets(seed_positions, voxel_size)
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    cand = keys[:, None, :] + offs[:, None, :] * _MASKS[None, :, :]
    return np.unique(pack_keys(cand.reshape(-1, 3)))


def selected_voxel_set(seed_positions, voxel_size: float) -> set[tuple[int, int, int]]:
    return {tuple(int(v) for v in k) for k in unpack_keys(selected_voxels(seed_positions, voxel_size))}


def context_mask(source_positions, selected: np.ndarray, voxel_size: float) -> np.ndarray:
    pts = check_positions(source_positions)
    if len(pts) == 0 or len(selected) == 0:
        return np.zeros(len(pts), dtype=bool)
    return np.isin(pack_keys(np.floor(pts / voxel_size).astype(np.int64)), selected)


def densify_cluster(cluster: Cluster, context_source: ScanCloud,
                    params: DensificationParams | None = None,
                    source_scan_indices=None) -> Cluster:
    """Attach every ``context_source`` point lying in the cluster's selected voxels.

    ``source_scan_indices`` marks source points that belong to the scan being
    segmented (their index in that scan, -1 otherwise); sources matching a
    seed index are skipped so seeds never reappear as context.
    """
    params = params or DensificationParams()
    selected = selected_voxels(cluster.seed_points.positions, params.voxel_size)
    mask = context_mask(context_source.positions, selected, params.voxel_size)
    if source_scan_indices is None:
        source_scan_indices = np.full(len(context_source), -1, dtype=np.int64)
    source_scan_indices = np.asarray(source_scan_indices, dtype=np.int64)
    if len(source_scan_indices) != len(context_source):
        raise InvalidParameterError("source_scan_indices must match the context source length")
    mask &= ~np.isin(source_scan_indices, cluster.seed_indices)
    return Cluster(cluster.seed_indices, cluster.seed_points, context_source.subset(mask),
                   source_scan_indices[mask], cluster.scan_id, cluster.cluster_id)
