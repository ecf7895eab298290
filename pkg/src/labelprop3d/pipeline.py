"""Per-scan orchestration and fusion of geometric and learned predictions."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .accumulation import ReferenceCloud
from .backends import (OCCUPANCY, ClusterBatch, ClusterPrediction, SegmentationBackend,
                       make_backend)
from .clustering import Cluster, extract_residual_clusters
from .densification import DensificationParams, densify_cluster
from .errors import ContractViolation, IncompleteCoverageError, InvalidParameterError
from .geometry import RigidPose, ScanCloud, transform_cloud
from .mos import MosConfig, attach_timestamp_feature, load_mos_mapping
from .propagation import (LabelPartition, PropagationParams, PropagationResult, load_partition,
                          propagate_labels)

STAGES = ("registration", "propagation", "clustering", "densification", "segmentation",
          "fusion", "accumulation")


def best_backend_predictions(predictions: ClusterPrediction, batch: ClusterBatch):
    """Winning backend prediction per current-scan point.

    Returns ``(scan_indices, labels, confidences)``. A point predicted by
    several clusters keeps the most confident prediction, lowest class id on
    ties; reference-cloud context points are dropped.
    """
    ids, lab, cf = [], [], []
    for cluster, plab, pconf in zip(batch.clusters, predictions.labels, predictions.confidences):
        point_ids = np.concatenate([cluster.seed_indices, cluster.context_scan_indices])
        plab, pconf = np.asarray(plab, dtype=np.int64), np.asarray(pconf, dtype=np.float64)
        keep = (point_ids >= 0) & (plab >= 1) & (pconf > 0)
        ids.append(point_ids[keep])
        lab.append(plab[keep])
        cf.append(pconf[keep])
    if not ids:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    ids, lab, cf = np.concatenate(ids), np.concatenate(lab), np.concatenate(cf)
    order = np.lexsort((lab, -cf, ids))
    ids, lab, cf = ids[order], lab[order], cf[order]
    _, first = np.unique(ids, return_index=True)
    return ids[first], lab[first], np.minimum(cf[first], 1.0)


def fuse(propagation: PropagationResult, predictions: ClusterPrediction, scan: ScanCloud,
         batch: ClusterBatch, winners=None) -> ScanCloud:
    """Merge backend predictions into the propagated labels of ``scan``.

    Backend predictions override propagated labels wherever both exist, for
    seeds and for current-scan context points alike. Every residual point
    must end up labeled.
    """
    labels = np.asarray(propagation.labels, dtype=np.int64).copy()
    conf = np.asarray(propagation.confidences, dtype=np.float64).copy()
    if len(labels) != len(scan):
        raise ContractViolation("propagation result does not match the scan")
    ids, lab, cf = winners if winners is not None else best_backend_predictions(predictions, batch)
    labels[ids] = lab
    conf[ids] = cf
    missing = np.nonzero(labels < 1)[0]
    if len(missing):
        raise IncompleteCoverageError(
            f"{len(missing)} residual points received no prediction (first: {missing[:5].tolist()})")
    return scan.with_labels(labels, conf)


@dataclass
class TimingReport:
    """Wall-clock seconds per scan and stage, file I/O excluded."""

    stages: tuple[str, ...] = STAGES
    seconds: list[list[float]] = field(default_factory=list)

    def add(self, per_stage: dict[str, float]) -> None:
        self.seconds.append([per_stage.get(s, 0.0) for s in self.stages])

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.seconds, dtype=np.float64).reshape(-1, len(self.stages))

    @property
    def n_scans(self) -> int:
        return len(self.seconds)

    def stage_seconds(self) -> dict[str, float]:
        """Mean seconds per scan for each stage."""
        arr = self.array
        means = arr.mean(axis=0) if len(arr) else np.zeros(len(self.stages))
        return dict(zip(self.stages, means.tolist()))

    def total_seconds(self) -> float:
        arr = self.array
        return float(arr.sum(axis=1).mean()) if len(arr) else 0.0

    @staticmethod
    def _hz(seconds: float) -> float:
        return 1.0 / seconds if seconds > 0 else float("inf")

    def stage_hz(self) -> dict[str, float]:
        return {s: self._hz(v) for s, v in self.stage_seconds().items()}

    def total_hz(self) -> float:
        return self._hz(self.total_seconds())

    def to_dict(self) -> dict:
        return {"scans": self.n_scans,
                "stage_seconds": self.stage_seconds(),
                "stage_hz": self.stage_hz(),
                "total_seconds": self.total_seconds(),
                "total_hz": self.total_hz()}

    def format(self) -> str:
        rows = [f"{'stage':<14}{'ms/scan':>12}{'Hz':>12}"]
        hz = self.stage_hz()
        for stage, sec in self.stage_seconds().items():
            rows.append(f"{stage:<14}{sec * 1e3:>12.2f}{hz[stage]:>12.2f}")
        rows.append(f"{'total':<14}{self.total_seconds() * 1e3:>12.2f}{self.total_hz():>12.2f}")
        return "\n".join(rows)


@dataclass(eq=False)
class ScanResult:
    scan_id: int
    cloud: ScanCloud
    propagated: np.ndarray
    predicted: np.ndarray
    n_clusters: int
    n_context: int
    timings: dict[str, float]

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels

    @property
    def confidences(self) -> np.ndarray:
        return self.cloud.confidences

    @property
    def propagated_fraction(self) -> float:
        n = len(self.propagated)
        return float(np.count_nonzero(self.propagated)) / n if n else 0.0


@dataclass(eq=False)
class SequenceResult:
    scans: list[ScanResult] = field(default_factory=list)
    timing: TimingReport = field(default_factory=TimingReport)

    @property
    def labels(self) -> list[np.ndarray]:
        return [s.labels for s in self.scans]

    @property
    def propagated_fractions(self) -> list[float]:
        return [s.propagated_fraction for s in self.scans]


@dataclass(eq=False)
class _Prepared:
    scan_id: int
    pose: RigidPose
    world: ScanCloud
    propagation: PropagationResult
    batch: ClusterBatch
    timings: dict[str, float]


class _Stopwatch:
    def __init__(self):
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = self.timings.get(stage, 0.0) + (now - self._t)
        self._t = now


class LabelProp3D(BaseEstimator):
    """Sequential LiDAR segmenter driven by geometric label propagation.

    Parameters mirror the method's hyperparameters. Nothing is learned:
    :meth:`fit` validates the configuration and resets the reference cloud,
    :meth:`process_scan` consumes one registered scan at a time and
    :meth:`predict` runs a whole sequence from a fresh state.

    Parameters
    ----------
    d_p : float
        Kernel width of the propagation vote weights, meters.
    n_clusters : int
        Number of K-means clusters extracted from residual points.
    n_scans : int
        Number of past scans kept in the reference cloud.
    partition : str or LabelPartition
        Static/dynamic class split, a bundled name or a YAML path.
    backend : str or backend object
        ``oracle``, ``nn``, ``external:DIR`` or any object with ``segment``.
    mos : MosConfig, {"binary", "semantic"} or None
        Moving-object mode: swaps in the MOS partition, cluster count,
        densification voxel and the timestamp feature.
    """

    def __init__(self, d_p=0.30, vote_threshold=0.5, index_cell=0.80, n_clusters=20,
                 n_scans=20, subsample_cell=0.05, max_range=75.0, densify_voxel=2.0,
                 max_iter=50, partition="semantickitti", backend="oracle",
                 feature_channels=(OCCUPANCY,), mos=None, n_jobs=1, random_state=0):
        self.d_p = d_p
        self.vote_threshold = vote_threshold
        self.index_cell = index_cell
        self.n_clusters = n_clusters
        self.n_scans = n_scans
        self.subsample_cell = subsample_cell
        self.max_range = max_range
        self.densify_voxel = densify_voxel
        self.max_iter = max_iter
        self.partition = partition
        self.backend = backend
        self.feature_channels = feature_channels
        self.mos = mos
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Validate parameters and start from an empty reference cloud."""
        mos = self.mos
        if isinstance(mos, str):
            mos = MosConfig(mode=mos)
        self.mos_ = mos
        self.propagation_params_ = PropagationParams(self.d_p, self.vote_threshold,
                                                     self.index_cell)
        if mos is not None:
            self.partition_ = load_mos_mapping(mos.mapping).partition(mos.mode)
            self.n_clusters_ = int(mos.n_clusters)
            self.densification_params_ = DensificationParams(mos.densify_voxel)
        else:
            self.partition_ = (self.partition if isinstance(self.partition, LabelPartition)
                               else load_partition(self.partition))
            self.n_clusters_ = int(self.n_clusters)
            self.densification_params_ = DensificationParams(self.densify_voxel)
        if self.n_clusters_ < 1:
            raise InvalidParameterError("n_clusters must be >= 1")
        if int(self.max_iter) < 1:
            raise InvalidParameterError("max_iter must be >= 1")
        if int(self.random_state) < 0:
            raise InvalidParameterError("random_state must be a non-negative integer")
        self.backend_ = (make_backend(self.backend) if isinstance(self.backend, str)
                         else self.backend)
        self.reference_ = ReferenceCloud(self.n_scans, self.subsample_cell, self.max_range,
                                         self.index_cell)
        self.timing_ = TimingReport()
        self.n_processed_ = 0
        return self

    # -- stages --------------------------------------------------------------

    def _channels(self) -> tuple[str, ...]:
        return tuple(self.feature_channels)

    def _prepare(self, scan: ScanCloud, pose: RigidPose, scan_id: int | None) -> _Prepared:
        check_is_fitted(self, "reference_")
        clock = _Stopwatch()
        if scan_id is None:
            scan_id = int(scan.scan_index[0]) if len(scan) else self.n_processed_
        if len(scan) and np.any(scan.scan_index != scan_id):
            scan = scan.replace(scan_index=scan_id)
        if not isinstance(pose, RigidPose):
            pose = RigidPose.from_matrix(pose)
        world = transform_cloud(scan.replace(labels=None, confidences=None), pose)
        clock.lap("registration")

        prop = propagate_labels(self.reference_, world, self.partition_,
                                self.propagation_params_)
        world = world.with_labels(prop.labels, prop.confidences)
        clock.lap("propagation")

        clusters = extract_residual_clusters(world, prop.residual_mask, self.n_clusters_,
                                             self.max_iter, [int(self.random_state), scan_id],
                                             scan_id)
        clock.lap("clustering")

        clusters = self._densify(clusters, world, prop)
        batch = ClusterBatch(clusters, self._channels(), scan_id)
        if self.mos_ is not None and self.mos_.timestamp_feature:
            batch = attach_timestamp_feature(batch)
        clock.lap("densification")
        return _Prepared(scan_id, pose, world, prop, batch, clock.timings)

    def _densify(self, clusters: list[Cluster], world: ScanCloud,
                 prop: PropagationResult) -> list[Cluster]:
        if not clusters:
            return clusters
        propagated = np.nonzero(~prop.residual_mask)[0]
        current = world.subset(propagated)
        ref = self.reference_.cloud
        if len(ref):
            if ref.channels != world.channels:
                raise ContractViolation("scan channels differ from the reference cloud")
            source = ScanCloud.concatenate([ref, current])
            ids = np.concatenate([np.full(len(ref), -1, dtype=np.int64), propagated])
        else:
            source, ids = current, propagated

        def work(cluster):
            return densify_cluster(cluster, source, self.densification_params_, ids)

        if int(self.n_jobs) > 1 and len(clusters) > 1:
            with ThreadPoolExecutor(int(self.n_jobs)) as pool:
                return list(pool.map(work, clusters))
        return [work(c) for c in clusters]

    def process_scan(self, scan: ScanCloud, pose: RigidPose,
                     scan_id: int | None = None) -> ScanResult:
        """Segment one sensor-frame scan and add it to the reference cloud."""
        prep = self._prepare(scan, pose, scan_id)
        clock = _Stopwatch()
        batch = prep.batch
        if batch.clusters:
            predictions = self.backend_.segment(batch).validate(batch)
        else:
            predictions = ClusterPrediction()
        clock.lap("segmentation")
        winners = best_backend_predictions(predictions, batch)
        fused = fuse(prep.propagation, predictions, prep.world, batch, winners)
        clock.lap("fusion")
        self.reference_.push(fused, prep.pose.translation, prep.scan_id)
        clock.lap("accumulation")

        timings = {**prep.timings, **clock.timings}
        self.timing_.add(timings)
        self.n_processed_ += 1
        predicted = np.zeros(len(fused), dtype=bool)
        predicted[winners[0]] = True
        return ScanResult(prep.scan_id, fused, ~prep.propagation.residual_mask, predicted,
                          len(batch.clusters),
                          int(sum(len(c.context_points) for c in batch.clusters)), timings)

    def predict_sequence(self, scans, poses) -> SequenceResult:
        scans, poses = list(scans), list(poses)
        if len(scans) != len(poses):
            raise ContractViolation(f"{len(scans)} scans but {len(poses)} poses")
        self.fit()
        result = SequenceResult()
        for scan, pose in zip(scans, poses):
            result.scans.append(self.process_scan(scan, pose))
        result.timing = self.timing_
        return result

    def predict(self, scans, poses) -> list[np.ndarray]:
        """Final per-point labels of every scan, in input point order."""
        return self.predict_sequence(scans, poses).labels


def process_sequence(scans, poses, config: dict | None = None,
                     backend: SegmentationBackend | str = "oracle") -> SequenceResult:
    """Functional entry point: run a fresh :class:`LabelProp3D` over a sequence."""
    return LabelProp3D(**(config or {}), backend=backend).predict_sequence(scans, poses)
