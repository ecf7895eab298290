"""Per-cluster segmentation backends and the file exchange protocol.

A backend receives a :class:`ClusterBatch` and returns one (class, confidence)
pair for every point of every cluster, seeds first then context.

Cluster files (little-endian)::

    header   magic b"3DLP" | version u32 = 1 | point count u32 | channel count u32
    record   x, y, z f32 | channels f32 * C | label i32 | confidence f32

Prediction files use the same header with a channel count of 0, followed by
``class i32 | confidence f32`` records in cluster point order.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .clustering import Cluster
from .errors import BackendError, ContractViolation, InvalidParameterError, ProtocolError

MAGIC = b"3DLP"
VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("count", "<u4"), ("channels", "<u4")])
PREDICTION_RECORD = np.dtype([("label", "<i4"), ("confidence", "<f4")])

OCCUPANCY = "occupancy"
REFLECTIVITY = "reflectivity"
TIMESTAMP = "timestamp"
KNOWN_CHANNELS = (OCCUPANCY, REFLECTIVITY, TIMESTAMP)


def cluster_record(n_channels: int) -> np.dtype:
    return np.dtype([("xyz", "<f4", (3,)), ("features", "<f4", (n_channels,)),
                     ("label", "<i4"), ("confidence", "<f4")])


@dataclass(eq=False)
class ClusterBatch:
    """Clusters of one scan sharing a feature layout.

    ``channels`` names the network input features in order: ``occupancy``
    (constant 1), ``reflectivity`` (read from the cloud) and ``timestamp``
    (+1 for points of the scan being segmented, -1 for older points).
    """

    clusters: list[Cluster]
    channels: tuple[str, ...] = (OCCUPANCY,)
    scan_id: int = 0
    reflectivity_dropped: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        unknown = set(self.channels) - set(KNOWN_CHANNELS)
        if unknown:
            raise ContractViolation(f"unknown feature channels {sorted(unknown)}")
        if len(set(self.channels)) != len(self.channels):
            raise ContractViolation("duplicate feature channel")

    def __len__(self) -> int:
        return len(self.clusters)

    def features(self, cluster: Cluster) -> np.ndarray:
        """Network input features of every cluster point, shape (n, C)."""
        pts = cluster.points
        cols = []
        for name in self.channels:
            if name == OCCUPANCY or (name == REFLECTIVITY and self.reflectivity_dropped):
                cols.append(np.ones(len(pts)))
            elif name == REFLECTIVITY:
                cols.append(pts.channel(REFLECTIVITY))
            else:
                cols.append(np.where(pts.scan_index == self.scan_id, 1.0, -1.0))
        return np.column_stack(cols) if cols else np.zeros((len(pts), 0))


@dataclass(eq=False)
class ClusterPrediction:
    labels: list[np.ndarray] = field(default_factory=list)
    confidences: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self, batch: ClusterBatch) -> "ClusterPrediction":
        if len(self.labels) != len(batch.clusters) or len(self.confidences) != len(batch.clusters):
            raise BackendError("prediction count does not match cluster count",
                               [c.cluster_id for c in batch.clusters])
        bad = []
        for cluster, lab, conf in zip(batch.clusters, self.labels, self.confidences):
            if (len(lab) != len(cluster) or len(conf) != len(cluster)
                    or np.any((np.asarray(conf) < 0) | (np.asarray(conf) > 1))):
                bad.append(cluster.cluster_id)
        if bad:
            raise BackendError(f"incomplete or invalid predictions for clusters {bad}", bad)
        return self


class SegmentationBackend(Protocol):
    def segment(self, batch: ClusterBatch) -> ClusterPrediction: ...


class GroundTruthOracle:
    """Predicts each point's ground-truth label with confidence 1."""

    def segment(self, batch: ClusterBatch) -> ClusterPrediction:
        labels, conf = [], []
        for cluster in batch.clusters:
            gt = cluster.points.ground_truth
            if gt is None:
                raise BackendError("ground truth unavailable for cluster", [cluster.cluster_id])
            if np.any(gt[:cluster.n_seeds] < 1):
                raise BackendError("seed points without a ground-truth class",
                                   [cluster.cluster_id])
            labels.append(gt.copy())
            conf.append(np.ones(len(gt)))
        return ClusterPrediction(labels, conf)


class NearestNeighborBaseline:
    """Seeds copy the label of their nearest labeled context point.

    Context points keep their own label. Clusters without labeled context
    fall back to ``fallback_class`` at ``fallback_confidence``.
    """

    def __init__(self, fallback_class: int = 1, fallback_confidence: float = 0.01):
        if fallback_class < 1 or not 0 < fallback_confidence <= 1:
            raise InvalidParameterError("fallback must be a class id >= 1 with confidence in (0, 1]")
        self.fallback_class = int(fallback_class)
        self.fallback_confidence = float(fallback_confidence)

    def segment(self, batch: ClusterBatch) -> ClusterPrediction:
        labels, conf = [], []
        for cluster in batch.clusters:
            ctx = cluster.context_points
            ctx_lab = ctx.labels.copy()
            ctx_conf = ctx.confidences.copy()
            usable = np.nonzero(ctx_lab >= 1)[0]
            n = cluster.n_seeds
            if len(usable) == 0:
                seed_lab = np.full(n, self.fallback_class, dtype=np.int64)
                seed_conf = np.full(n, self.fallback_confidence)
                ctx_lab[ctx_lab < 1] = self.fallback_class
                ctx_conf[ctx_conf <= 0] = self.fallback_confidence
            else:
                seed_lab, seed_conf = self._nearest(cluster.seed_points.positions,
                                                    ctx.positions[usable], ctx_lab[usable],
                                                    ctx_conf[usable])
                unl = ctx_lab < 1
                if np.any(unl):
                    ctx_lab[unl], ctx_conf[unl] = self._nearest(
                        ctx.positions[unl], ctx.positions[usable], ctx_lab[usable],
                        ctx_conf[usable])
            labels.append(np.concatenate([seed_lab, ctx_lab]))
            conf.append(np.concatenate([seed_conf, ctx_conf]))
        return ClusterPrediction(labels, conf)

    @staticmethod
    def _nearest(queries, positions, labels, confidences):
        tree = cKDTree(positions)
        k = min(8, len(positions))
        dist, idx = tree.query(queries, k=k)
        dist, idx = dist.reshape(len(queries), k), idx.reshape(len(queries), k)
        # among equidistant neighbours prefer the lowest class id
        tied = dist == dist[:, :1]
        cand = np.where(tied, labels[idx], np.iinfo(np.int64).max)
        pick = np.argmin(cand, axis=1)
        chosen = idx[np.arange(len(queries)), pick]
        return labels[chosen].astype(np.int64), confidences[chosen].astype(np.float64)


# -- file protocol ----------------------------------------------------------------

def _read_header(raw: bytes, path) -> np.ndarray:
    if len(raw) < HEADER.itemsize:
        raise ProtocolError(f"{path}: file shorter than the 16-byte header")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if header["magic"] != MAGIC:
        raise ProtocolError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VERSION:
        raise ProtocolError(f"{path}: unsupported protocol version {int(header['version'])}")
    return header


def _header_bytes(count: int, channels: int) -> bytes:
    return np.array([(MAGIC, VERSION, count, channels)], dtype=HEADER).tobytes()


def write_cluster_file(path, positions, features, labels, confidences) -> None:
    features = np.asarray(features, dtype=np.float64)
    n = len(positions)
    features = features.reshape(n, -1) if n else features.reshape(0, features.shape[-1])
    rec = np.zeros(n, dtype=cluster_record(features.shape[1]))
    rec["xyz"] = positions
    rec["features"] = features
    rec["label"] = labels
    rec["confidence"] = confidences
    Path(path).write_bytes(_header_bytes(n, features.shape[1]) + rec.tobytes())


def read_cluster_file(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    header = _read_header(raw, path)
    n, c = int(header["count"]), int(header["channels"])
    dtype = cluster_record(c)
    if len(raw) != HEADER.itemsize + n * dtype.itemsize:
        raise ProtocolError(f"{path}: expected {n} records of {dtype.itemsize} bytes, "
                            f"got {len(raw) - HEADER.itemsize} payload bytes")
    rec = np.frombuffer(raw, dtype=dtype, offset=HEADER.itemsize)
    return {"positions": rec["xyz"].copy(), "features": rec["features"].reshape(n, c).copy(),
            "labels": rec["label"].copy(), "confidences": rec["confidence"].copy()}


def write_prediction_file(path, labels, confidences) -> None:
    rec = np.zeros(len(labels), dtype=PREDICTION_RECORD)
    rec["label"] = labels
    rec["confidence"] = confidences
    Path(path).write_bytes(_header_bytes(len(labels), 0) + rec.tobytes())


def read_prediction_file(path, expected_count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    header = _read_header(raw, path)
    n = int(header["count"])
    if int(header["channels"]) != 0:
        raise ProtocolError(f"{path}: prediction files carry no feature channels")
    if len(raw) != HEADER.itemsize + n * PREDICTION_RECORD.itemsize:
        raise ProtocolError(f"{path}: truncated or oversized prediction payload")
    if expected_count is not None and n != expected_count:
        raise ProtocolError(f"{path}: {n} predictions for a cluster of {expected_count} points")
    rec = np.frombuffer(raw, dtype=PREDICTION_RECORD, offset=HEADER.itemsize)
    return rec["label"].copy(), rec["confidence"].copy()


def cluster_filename(scan_id: int, cluster_id: int) -> str:
    return f"{scan_id:06d}_{cluster_id:02d}.bin"


def export_clusters(batch: ClusterBatch, directory, labels: str = "input") -> list[Path]:
    """Write ``clusters/NNNNNN_CC.bin`` for every cluster of the batch.

    ``labels="input"`` writes the points' current labels (-1 for residual
    seeds); ``labels="ground_truth"`` writes their annotation instead.
    """
    out = Path(directory) / "clusters"
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for cluster in batch.clusters:
        pts = cluster.points
        if labels == "ground_truth":
            if pts.ground_truth is None:
                raise ContractViolation("ground-truth export needs annotated points")
            known = pts.ground_truth >= 1
            lab, conf = np.where(known, pts.ground_truth, -1), known.astype(np.float64)
        else:
            lab, conf = pts.labels, pts.confidences
        path = out / cluster_filename(batch.scan_id, cluster.cluster_id)
        write_cluster_file(path, pts.positions, batch.features(cluster), lab, conf)
        paths.append(path)
    return paths


def import_predictions(directory, scan_id: int | None = None,
                       cluster_ids: Sequence[int] | None = None) -> ClusterPrediction:
    """Read ``predictions/`` files matching the exported ``clusters/`` files."""
    root = Path(directory)
    if cluster_ids is None:
        pattern = "*.bin" if scan_id is None else f"{scan_id:06d}_*.bin"
        names = sorted(p.name for p in (root / "clusters").glob(pattern))
    else:
        names = [cluster_filename(scan_id, c) for c in cluster_ids]
    labels, conf = [], []
    for name in names:
        cluster_path = root / "clusters" / name
        raw = cluster_path.read_bytes()
        count = int(_read_header(raw, cluster_path)["count"])
        pred_path = root / "predictions" / name
        if not pred_path.exists():
            raise ProtocolError(f"{pred_path}: missing prediction file")
        lab, c = read_prediction_file(pred_path, count)
        labels.append(lab.astype(np.int64))
        conf.append(c.astype(np.float64))
    return ClusterPrediction(labels, conf)


class ExternalProcessBackend:
    """Delegate segmentation to an out-of-process model through files.

    Clusters are exported under ``workdir``; ``command`` (if any) is then run
    with the work directory and scan id appended, and must write the matching
    ``predictions/`` files before exiting with status 0.
    """

    def __init__(self, workdir, command: str | Sequence[str] | None = None,
                 timeout: float | None = None):
        self.workdir = Path(workdir)
        self.command = shlex.split(command) if isinstance(command, str) else command
        self.timeout = timeout

    def segment(self, batch: ClusterBatch) -> ClusterPrediction:
        ids = [c.cluster_id for c in batch.clusters]
        export_clusters(batch, self.workdir)
        if self.command:
            argv = [*self.command, str(self.workdir), str(batch.scan_id)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise BackendError(f"external backend failed to run: {exc}", ids) from exc
            if proc.returncode != 0:
                raise BackendError(f"external backend exited with {proc.returncode}: "
                                   f"{proc.stderr.strip()}", ids)
        try:
            pred = import_predictions(self.workdir, batch.scan_id, ids)
        except ProtocolError as exc:
            raise BackendError(str(exc), ids) from exc
        return pred.validate(batch)


def make_backend(spec: str, **kwargs) -> SegmentationBackend:
    """Build a backend from ``oracle``, ``nn`` or ``external:DIR``."""
    if spec == "oracle":
        return GroundTruthOracle()
    if spec == "nn":
        return NearestNeighborBaseline(**{k: v for k, v in kwargs.items()
                                          if k in ("fallback_class", "fallback_confidence")})
    if spec.startswith("external:"):
        return ExternalProcessBackend(spec.split(":", 1)[1], kwargs.get("command"),
                                      kwargs.get("timeout"))
    raise InvalidParameterError(f"unknown backend {spec!r}; expected oracle, nn or external:DIR")
