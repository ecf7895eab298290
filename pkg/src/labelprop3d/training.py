"""Export of densified training clusters with ground-truth labels.

Training clusters come from the same pipeline as at inference, except that
the reference cloud is filled with ground truth instead of past predictions.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backends import OCCUPANCY, REFLECTIVITY, export_clusters
from .errors import ContractViolation, InvalidParameterError
from .pipeline import LabelProp3D


def reflectivity_dropout_mask(n_scans: int, fraction: float, seed: int = 0) -> np.ndarray:
    """Per-scan flags: True where reflectivity is replaced by occupancy."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidParameterError(f"dropout fraction must lie in [0, 1], got {fraction}")
    return np.random.default_rng(seed).random(n_scans) < fraction


def export_training_clusters(scans, poses, output_dir, reflectivity_dropout: float = 0.0,
                             seed: int = 0, **params) -> dict:
    """Write ground-truth-labeled clusters of every scan under ``output_dir/clusters``.

    ``params`` are forwarded to :class:`LabelProp3D`; the feature layout
    defaults to occupancy plus reflectivity so that dropout is visible.
    """
    scans, poses = list(scans), list(poses)
    if len(scans) != len(poses):
        raise ContractViolation(f"{len(scans)} scans but {len(poses)} poses")
    dropped = reflectivity_dropout_mask(len(scans), reflectivity_dropout, seed)
    params.setdefault("feature_channels", (OCCUPANCY, REFLECTIVITY))
    params.setdefault("random_state", seed)
    est = LabelProp3D(backend=None, **params).fit()
    out = Path(output_dir)
    summary = {"scans": [], "reflectivity_dropout": reflectivity_dropout, "seed": seed,
               "channels": list(est.feature_channels)}
    for i, (scan, pose) in enumerate(zip(scans, poses)):
        if scan.ground_truth is None:
            raise ContractViolation(f"scan {i} has no ground-truth labels")
        prep = est._prepare(scan, pose, None)
        batch = replace(prep.batch, reflectivity_dropped=bool(dropped[i]))
        files = export_clusters(batch, out, labels="ground_truth")
        gt = prep.world.ground_truth
        labeled = gt >= 1
        truth = prep.world.with_labels(np.where(labeled, gt, -1), labeled.astype(np.float64))
        est.reference_.push(truth.subset(labeled), prep.pose.translation, prep.scan_id)
        summary["scans"].append({"scan": prep.scan_id, "clusters": len(files),
                                 "reflectivity_dropped": bool(dropped[i]),
                                 "propagated_fraction": prep.propagation.propagated_fraction})
    out.mkdir(parents=True, exist_ok=True)
    (out / "export.json").write_text(json.dumps(summary, indent=2))
    return summary
