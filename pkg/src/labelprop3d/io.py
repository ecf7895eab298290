"""Readers and writers for KITTI-style LiDAR sequences.

Layout of a sequence directory::

    velodyne/NNNNNN.bin    float32 x, y, z, reflectivity per point
    labels/NNNNNN.label    uint32 per point: semantic id | instance id << 16
    poses.txt              12 floats per line, row-major 3x4 sensor-to-world
    manifest.yaml          optional; lists the scans explicitly (synthetic scenes)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError, LabelMappingError
from .geometry import RigidPose, ScanCloud, orthonormality_error
from .propagation import DATA_DIR

log = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
KITTI_CHANNELS = ("reflectivity", "occupancy")


def read_kitti_raw(path) -> np.ndarray:
    """(N, 4) float32 array exactly as stored."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4).copy()


def read_kitti_points(path, scan_index: int = 0) -> ScanCloud:
    data = read_kitti_raw(path)
    feats = np.column_stack([data[:, 3], np.ones(len(data), dtype=np.float32)])
    return ScanCloud(data[:, :3], feats, scan_index=scan_index, channels=KITTI_CHANNELS)


def write_kitti_points(path, cloud) -> None:
    """Write a cloud (or an (N, 4) array) as float32 x, y, z, reflectivity."""
    if isinstance(cloud, ScanCloud):
        refl = (cloud.channel("reflectivity") if "reflectivity" in cloud.channels
                else np.zeros(len(cloud)))
        data = np.column_stack([cloud.positions, refl])
    else:
        data = np.asarray(cloud).reshape(-1, 4)
    Path(path).write_bytes(np.ascontiguousarray(data, dtype=POINT_DTYPE).tobytes())


def read_label_raw(path, expected_count: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    values = np.frombuffer(raw, dtype=LABEL_DTYPE).copy()
    if expected_count is not None and len(values) != expected_count:
        raise FormatError(f"{path}: {len(values)} labels for {expected_count} points")
    return values


def read_labels(path, expected_count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (semantic, instance) id arrays."""
    values = read_label_raw(path, expected_count)
    return (values & 0xFFFF).astype(np.int64), (values >> 16).astype(np.int64)


def write_labels(path, semantic, instance=None) -> None:
    sem = np.asarray(semantic, dtype=np.int64)
    inst = np.zeros_like(sem) if instance is None else np.asarray(instance, dtype=np.int64)
    if np.any((sem < 0) | (sem > 0xFFFF)) or np.any((inst < 0) | (inst > 0xFFFF)):
        raise FormatError("semantic and instance ids must fit in 16 bits")
    packed = (sem | (inst << 16)).astype(LABEL_DTYPE)
    Path(path).write_bytes(packed.tobytes())


def nearest_rotation(matrix) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def parse_pose_line(line: str, lineno: int = 0) -> RigidPose:
    try:
        values = [float(v) for v in line.split()]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None
    if len(values) != 12:
        raise FormatError(f"line {lineno}: expected 12 numbers, got {len(values)}")
    m = np.array(values).reshape(3, 4)
    if not np.all(np.isfinite(m)):
        raise FormatError(f"line {lineno}: non-finite value")
    rot = m[:, :3]
    if orthonormality_error(rot) > 1e-6:
        log.warning("line %d: re-orthonormalising rotation (drift %.2e)", lineno,
                    orthonormality_error(rot))
        rot = nearest_rotation(rot)
    if np.linalg.det(rot) < 0:
        raise FormatError(f"line {lineno}: rotation is a reflection")
    return RigidPose(rot, m[:, 3])


def read_poses(path) -> list[RigidPose]:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                poses.append(parse_pose_line(line, lineno))
    return poses


def format_pose(pose: RigidPose) -> str:
    m = pose.as_matrix()[:3, :4].reshape(-1)
    return " ".join(repr(float(v)) for v in m)


def write_poses(path, poses) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def load_learning_map(name_or_path) -> dict[int, int]:
    """Raw annotation id -> learning id (0 = unlabeled) from a label config file."""
    path = Path(name_or_path)
    if not path.exists():
        path = DATA_DIR / f"{name_or_path}.yaml"
    doc = yaml.safe_load(path.read_text())
    classes = list(doc["classes"])
    return {int(k): 0 if v is None else classes.index(v) + 1
            for k, v in doc["learning_map"].items()}


def apply_learning_map(semantic, learning_map: dict[int, int]) -> np.ndarray:
    sem = np.asarray(semantic, dtype=np.int64)
    out = np.empty_like(sem)
    for raw in np.unique(sem):
        if int(raw) not in learning_map:
            raise LabelMappingError(f"raw label {int(raw)} is not declared by the learning map")
        out[sem == raw] = learning_map[int(raw)]
    return out


@dataclass
class Sequence:
    """Lazy handle on a sequence directory."""

    root: Path
    point_files: list[Path]
    label_files: list[Path | None]
    poses: list[RigidPose]
    learning_map: dict[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.point_files)

    @property
    def has_labels(self) -> bool:
        return all(p is not None and p.exists() for p in self.label_files)

    def scan_id(self, i: int) -> int:
        stem = self.point_files[i].stem
        return int(stem) if stem.isdigit() else i

    def load_scan(self, i: int) -> ScanCloud:
        cloud = read_kitti_points(self.point_files[i], scan_index=self.scan_id(i))
        path = self.label_files[i]
        if path is not None and path.exists():
            sem, _ = read_labels(path, len(cloud))
            if self.learning_map is not None:
                sem = apply_learning_map(sem, self.learning_map)
            cloud = cloud.replace(ground_truth=sem)
        return cloud

    def scans(self):
        for i in range(len(self)):
            yield self.load_scan(i)


def read_sequence(root, poses=None, learning_map=None) -> Sequence:
    """Open a KITTI-style sequence directory (or one described by manifest.yaml)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"sequence directory {root} does not exist")
    manifest = root / "manifest.yaml"
    meta: dict = {}
    if manifest.exists():
        meta = yaml.safe_load(manifest.read_text()) or {}
        entries = meta.get("scans", [])
        point_files = [root / e["points"] for e in entries]
        label_files = [root / e["labels"] if e.get("labels") else None for e in entries]
        pose_list = [RigidPose.from_matrix(np.array(e["pose"], dtype=np.float64).reshape(3, 4))
                     for e in entries if "pose" in e]
    else:
        point_files = sorted((root / "velodyne").glob("*.bin"))
        label_files = [root / "labels" / f"{p.stem}.label" for p in point_files]
        pose_list = []
    if poses is not None:
        pose_list = read_poses(poses)
    elif not pose_list and (root / "poses.txt").exists():
        pose_list = read_poses(root / "poses.txt")
    if len(pose_list) != len(point_files):
        raise FormatError(f"{root}: {len(point_files)} scans but {len(pose_list)} poses")
    if isinstance(learning_map, (str, Path)):
        learning_map = load_learning_map(learning_map)
    return Sequence(root, point_files, label_files, pose_list, learning_map, meta)


def write_sequence(root, scans, poses, labels=None, meta=None) -> Path:
    """Write a sequence in KITTI layout plus a manifest listing every scan."""
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    if labels is not None:
        (root / "labels").mkdir(exist_ok=True)
    entries = []
    for i, (scan, pose) in enumerate(zip(scans, poses)):
        name = f"{i:06d}"
        write_kitti_points(root / "velodyne" / f"{name}.bin", scan)
        entry = {"points": f"velodyne/{name}.bin",
                 "pose": [float(v) for v in pose.as_matrix()[:3, :4].reshape(-1)]}
        if labels is not None:
            write_labels(root / "labels" / f"{name}.label", labels[i])
            entry["labels"] = f"labels/{name}.label"
        entries.append(entry)
    write_poses(root / "poses.txt", poses)
    doc = dict(meta or {})
    doc["scans"] = entries
    (root / "manifest.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))
    return root
