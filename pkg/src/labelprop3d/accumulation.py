"""Sliding-window pseudo-dense reference cloud and trajectory perturbation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ContractViolation, InvalidParameterError
from .geometry import (WORLD, RigidPose, ScanCloud, VoxelIndex, as_point3, range_crop,
                       voxel_subsample)


class ReferenceCloud:
    """The last ``capacity`` segmented scans, registered, cropped and subsampled.

    Only fully labeled scans enter the window. Each scan is cropped around
    the ego position it was acquired from and subsampled on its own, so
    points from different scans may share a voxel. The merged cloud and its
    voxel index are rebuilt on every push and stay frozen between pushes.
    """

    def __init__(self, capacity: int = 20, subsample_cell: float = 0.05,
                 max_range: float = 75.0, index_cell: float = 0.80):
        if int(capacity) < 1:
            raise InvalidParameterError(f"capacity must be >= 1, got {capacity}")
        for name, value in (("subsample_cell", subsample_cell), ("max_range", max_range),
                            ("index_cell", index_cell)):
            if not value > 0:
                raise InvalidParameterError(f"{name} must be > 0, got {value}")
        self.capacity = int(capacity)
        self.subsample_cell = float(subsample_cell)
        self.max_range = float(max_range)
        self.index_cell = float(index_cell)
        self.window: deque[tuple[int, ScanCloud]] = deque()
        self._cloud: ScanCloud | None = None
        self._index: VoxelIndex | None = None

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def scan_indices(self) -> list[int]:
        return [idx for idx, _ in self.window]

    @property
    def cloud(self) -> ScanCloud:
        if self._cloud is None:
            if self.window:
                self._cloud = ScanCloud.concatenate([scan for _, scan in self.window])
            else:
                self._cloud = ScanCloud.empty(frame=WORLD)
        return self._cloud

    @property
    def index(self) -> VoxelIndex:
        if self._index is None:
            self._index = VoxelIndex(self.cloud.positions, self.index_cell)
        return self._index

    def push(self, scan: ScanCloud, ego_center, scan_index: int | None = None) -> "ReferenceCloud":
        if scan.frame != WORLD:
            raise ContractViolation("only world-frame scans can enter the reference cloud")
        if len(scan) and (np.any(scan.labels < 1) or np.any(scan.confidences <= 0)):
            raise ContractViolation(
                "reference scans must be fully segmented (label >= 1, confidence > 0)")
        if scan_index is None:
            if not len(scan):
                raise ContractViolation("scan_index is required for an empty scan")
            scan_index = int(scan.scan_index[0])
        if self.window and self.window[0][1].channels != scan.channels:
            raise ContractViolation("all reference scans must share one channel layout")
        kept = voxel_subsample(range_crop(scan, as_point3(ego_center), self.max_range),
                               self.subsample_cell)
        self.window.append((int(scan_index), kept))
        while len(self.window) > self.capacity:
            self.window.popleft()
        self._cloud = None
        self._index = None
        return self


def push_segmented_scan(ref: ReferenceCloud, scan: ScanCloud, ego_center) -> ReferenceCloud:
    return ref.push(scan, ego_center)


@dataclass(frozen=True)
class PoseNoiseParams:
    sigma_translation: float = 0.0
    sigma_rotation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_translation < 0 or self.sigma_rotation < 0:
            raise InvalidParameterError("noise standard deviations must be >= 0")


def perturb_poses(poses, params: PoseNoiseParams) -> list[RigidPose]:
    """Add Gaussian translation noise and random axis-angle rotation noise.

    Rotation noise draws a uniformly distributed axis and an angle
    ``|N(0, sigma_rotation)|`` and left-composes it with each rotation.
    """
    rng = np.random.default_rng(params.seed)
    out = []
    for pose in poses:
        dt = rng.normal(0.0, 1.0, 3) * params.sigma_translation
        axis = rng.normal(0.0, 1.0, 3)
        angle = abs(rng.normal(0.0, 1.0)) * params.sigma_rotation
        rotation = pose.rotation
        if angle > 0:
            axis /= np.linalg.norm(axis)
            rotation = Rotation.from_rotvec(axis * angle).as_matrix() @ pose.rotation
        out.append(RigidPose(rotation, pose.translation + dt))
    return out
