"""Geometric label propagation for sequential LiDAR semantic segmentation."""

from .accumulation import PoseNoiseParams, ReferenceCloud, perturb_poses, push_segmented_scan
from .backends import (ClusterBatch, ClusterPrediction, ExternalProcessBackend, GroundTruthOracle,
                       NearestNeighborBaseline, export_clusters, import_predictions, make_backend)
from .clustering import Cluster, ResidualKMeans, extract_residual_clusters, kmeans
from .densification import DensificationParams, densify_cluster
from .errors import (BackendError, ContractViolation, FormatError, IncompleteCoverageError,
                     InvalidParameterError, InvalidPoseError, LabelMappingError, LabelPropError,
                     ProtocolError)
from .evaluation import (ConfusionMatrix, LabelSetMapping, beam_subsample, evaluate,
                         load_label_set, metric_name)
from .geometry import (RigidPose, ScanCloud, VoxelIndex, VoxelSubsampler, build_voxel_index,
                       radius_neighbors, range_crop, transform_cloud, voxel_subsample)
from .mos import MosConfig, attach_timestamp_feature, mos_label_mapping
from .pipeline import LabelProp3D, TimingReport, fuse, process_sequence
from .propagation import (LabelPartition, PropagationParams, effective_radius, kernel_weight,
                          load_partition, propagate_labels)

__version__ = "0.1.0"

__all__ = [
    "BackendError", "Cluster", "ClusterBatch", "ClusterPrediction", "ConfusionMatrix",
    "ContractViolation", "DensificationParams", "ExternalProcessBackend", "FormatError",
    "GroundTruthOracle", "IncompleteCoverageError", "InvalidParameterError", "InvalidPoseError",
    "LabelMappingError", "LabelPartition", "LabelProp3D", "LabelPropError", "LabelSetMapping",
    "MosConfig", "NearestNeighborBaseline", "PoseNoiseParams", "PropagationParams",
    "ProtocolError", "ReferenceCloud", "ResidualKMeans", "RigidPose", "ScanCloud",
    "TimingReport", "VoxelIndex", "VoxelSubsampler", "attach_timestamp_feature",
    "beam_subsample", "build_voxel_index", "densify_cluster", "effective_radius", "evaluate",
    "export_clusters", "extract_residual_clusters", "fuse", "import_predictions", "kernel_weight",
    "kmeans", "load_label_set", "load_partition", "make_backend", "metric_name",
    "mos_label_mapping", "perturb_poses", "process_sequence", "propagate_labels",
    "push_segmented_scan", "radius_neighbors", "range_crop", "transform_cloud",
    "voxel_subsample",
]
