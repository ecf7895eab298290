"""Command line entry point: ``labelprop3d <command> [options]``.

Exit codes: 0 success, 1 usage error (bad flags, missing files, invalid
parameters), 2 malformed input data, 3 segmentation backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import io as lpio
from .accumulation import PoseNoiseParams, perturb_poses
from .errors import (BackendError, ContractViolation, FormatError, IncompleteCoverageError,
                     InvalidParameterError, LabelMappingError)
from .evaluation import beam_subsample, evaluate, load_label_set
from .geometry import ScanCloud
from .mos import MosConfig, mos_label_mapping
from .pipeline import LabelProp3D
from .synthetic import CAR, make_street_scene
from .training import export_training_clusters

log = logging.getLogger("labelprop3d")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{text} must be > 0")
        return value
    return parse


def _non_negative(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return value


def _existing_dir(text: str) -> Path:
    path = Path(text)
    if not path.is_dir():
        raise argparse.ArgumentTypeError(f"directory {text} does not exist")
    return path


def _existing_file(text: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"file {text} does not exist")
    return path


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=_positive(int), default=1,
                   help="worker threads for per-cluster stages")


def _add_pipeline(p, backend=True):
    p.add_argument("--sequence", type=_existing_dir, required=True,
                   help="sequence directory (KITTI layout or manifest.yaml)")
    p.add_argument("--poses", type=_existing_file, help="poses file, overrides the sequence's")
    p.add_argument("--label-map", help="learning map applied to ground truth (name or YAML)")
    if backend:
        p.add_argument("--backend", default="oracle", help="oracle, nn or external:DIR")
    p.add_argument("--dp", type=_positive(float), default=0.30, help="kernel width d_p in m")
    p.add_argument("--kc", type=_positive(int), default=20, help="residual clusters K_c")
    p.add_argument("--ns", type=_positive(int), default=20, help="reference window N_s")
    p.add_argument("--partition", default="semantickitti",
                   help="static/dynamic class split (name or YAML)")
    p.add_argument("--mos", choices=("binary", "semantic"), help="moving object segmentation")
    _add_common(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="labelprop3d",
                     description="Geometric label propagation for LiDAR sequences.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="segment a sequence")
    _add_pipeline(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("bench", help="per-stage timing report")
    _add_pipeline(p)
    p.add_argument("--json", type=Path, help="also write the report as JSON")

    p = sub.add_parser("export-train", help="export ground-truth training clusters")
    _add_pipeline(p, backend=False)
    p.add_argument("--dropout-reflectivity", type=_fraction, default=0.0,
                   help="fraction of scans whose reflectivity is replaced by occupancy")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="remap labels to a label set and score")
    p.add_argument("--labelset", required=True, help="built-in name (e.g. SK∩SP) or YAML file")
    p.add_argument("--gt", type=_existing_dir, required=True)
    p.add_argument("--pred", type=_existing_dir, required=True)
    p.add_argument("--eval-set", help="evaluation set name used in the metric name")
    p.add_argument("--report", type=Path, help="write the JSON report here")

    p = sub.add_parser("subsample-beams", help="keep a subset of beams, e.g. 64 -> 32")
    p.add_argument("--sequence", type=_existing_dir, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--keep", default="even", help="even, odd or STEP:OFFSET")
    p.add_argument("--beams", type=_positive(int), default=64, help="beams of the input sensor")

    p = sub.add_parser("perturb-poses", help="add Gaussian noise to a trajectory")
    p.add_argument("--poses", type=_existing_file, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sigma-t", type=_non_negative, default=0.0, help="translation sigma, m")
    p.add_argument("--sigma-r", type=_non_negative, default=0.0, help="rotation sigma, rad")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic street sequence")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scans", type=_positive(int), default=5)
    p.add_argument("--density", type=_positive(float), default=6.0, help="points per m^2")
    p.add_argument("--mover-speed", type=float, help="add a car moving this many m per scan")
    p.add_argument("--mover-label", type=int, default=CAR)
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- helpers ------------------------------------------------------------------------

def _estimator(args, backend) -> LabelProp3D:
    return LabelProp3D(d_p=args.dp, n_clusters=args.kc, n_scans=args.ns,
                       partition=args.partition, backend=backend,
                       mos=MosConfig(mode=args.mos) if args.mos else None,
                       n_jobs=args.threads, random_state=args.seed)


def _load_scans(args) -> tuple[lpio.Sequence, list[ScanCloud]]:
    seq = lpio.read_sequence(args.sequence, poses=args.poses, learning_map=args.label_map)
    scans = list(seq.scans())
    if args.mos:
        scans = [s if s.ground_truth is None else
                 s.replace(ground_truth=mos_label_mapping(s.ground_truth, args.mos))
                 for s in scans]
    return seq, scans


def _label_dir(root: Path) -> Path:
    return root / "labels" if (root / "labels").is_dir() else root


def _run_pipeline(args):
    seq, scans = _load_scans(args)
    est = _estimator(args, args.backend)
    result = est.fit().predict_sequence(scans, seq.poses) if scans else None
    return seq, est, result


# -- commands -----------------------------------------------------------------------

def cmd_run(args) -> int:
    seq, est, result = _run_pipeline(args)
    out = args.out
    (out / "labels").mkdir(parents=True, exist_ok=True)
    scans = [] if result is None else result.scans
    for i, res in enumerate(scans):
        lpio.write_labels(out / "labels" / f"{seq.scan_id(i):06d}.label", res.labels)
    summary = {
        "sequence": str(args.sequence),
        "params": {k: (v if isinstance(v, (int, float, str, type(None))) else str(v))
                   for k, v in est.get_params().items()},
        "scans": [{"scan": seq.scan_id(i), "points": len(r.labels),
                   "propagated_fraction": r.propagated_fraction, "clusters": r.n_clusters,
                   "context_points": r.n_context} for i, r in enumerate(scans)],
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2))
    timing = est.timing_.to_dict()
    timing["per_scan"] = est.timing_.array.tolist()
    (out / "timings.json").write_text(json.dumps(timing, indent=2))
    mean = np.mean([r.propagated_fraction for r in scans]) if scans else 0.0
    print(f"labeled {len(scans)} scans into {out / 'labels'} "
          f"(mean propagated fraction {mean:.3f})")
    return EXIT_OK


def cmd_bench(args) -> int:
    _, est, _ = _run_pipeline(args)
    print(est.timing_.format())
    if args.json:
        args.json.write_text(json.dumps(est.timing_.to_dict(), indent=2))
    return EXIT_OK


def cmd_export_train(args) -> int:
    seq, scans = _load_scans(args)
    summary = export_training_clusters(
        scans, seq.poses, args.out, reflectivity_dropout=args.dropout_reflectivity,
        seed=args.seed, d_p=args.dp, n_clusters=args.kc, n_scans=args.ns,
        partition=args.partition, mos=MosConfig(mode=args.mos) if args.mos else None,
        n_jobs=args.threads)
    n = sum(s["clusters"] for s in summary["scans"])
    print(f"wrote {n} clusters for {len(summary['scans'])} scans to {args.out / 'clusters'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    mapping = load_label_set(args.labelset)
    gt_dir, pred_dir = _label_dir(args.gt), _label_dir(args.pred)
    gt_files = sorted(gt_dir.glob("*.label"))
    if not gt_files:
        raise UsageError(f"no .label files in {gt_dir}")
    missing = [f.name for f in gt_files if not (pred_dir / f.name).is_file()]
    if missing:
        raise UsageError(f"{pred_dir} lacks predictions for {missing[:5]}")
    gts, preds = [], []
    for f in gt_files:
        gt, _ = lpio.read_labels(f)
        pred, _ = lpio.read_labels(pred_dir / f.name, expected_count=len(gt))
        gts.append(gt)
        preds.append(pred)
    report = evaluate(gts, preds, mapping, args.eval_set)
    text = json.dumps(report, indent=2, ensure_ascii=False)
    if args.report:
        args.report.write_text(text)
    print(text)
    return EXIT_OK


def _point_files(root: Path) -> list[Path]:
    manifest = root / "manifest.yaml"
    if manifest.exists():
        import yaml
        doc = yaml.safe_load(manifest.read_text()) or {}
        return [root / e["points"] for e in doc.get("scans", [])]
    return sorted((root / "velodyne").glob("*.bin"))


def cmd_subsample_beams(args) -> int:
    root, out = args.sequence, args.out
    files = _point_files(root)
    if not files:
        raise UsageError(f"no point files found in {root}")
    kept = 0
    for f in files:
        raw = lpio.read_kitti_raw(f)
        mask = np.zeros(len(raw), dtype=bool)
        mask[_kept_indices(raw[:, :3].astype(np.float64), args.keep, args.beams)] = True
        rel = f.relative_to(root)
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        lpio.write_kitti_points(out / rel, raw[mask])
        label = root / "labels" / f"{f.stem}.label"
        if label.exists():
            (out / "labels").mkdir(parents=True, exist_ok=True)
            lpio.read_label_raw(label, len(raw))[mask].tofile(out / "labels" / label.name)
        kept += int(mask.sum())
    for extra in ("poses.txt", "manifest.yaml", "calib.txt", "times.txt"):
        if (root / extra).exists():
            shutil.copyfile(root / extra, out / extra)
    print(f"kept {kept} points of {len(files)} scans (pattern {args.keep})")
    return EXIT_OK


def _kept_indices(positions, keep: str, n_beams: int) -> np.ndarray:
    # tag points with their row so the kept subset maps back to file rows
    tagged = ScanCloud(positions, scan_index=np.arange(len(positions)))
    sub, _ = beam_subsample(tagged, keep, n_beams=n_beams)
    return sub.scan_index


def cmd_perturb_poses(args) -> int:
    poses = lpio.read_poses(args.poses)
    noisy = perturb_poses(poses, PoseNoiseParams(args.sigma_t, args.sigma_r, args.seed))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    lpio.write_poses(args.out, noisy)
    print(f"wrote {len(noisy)} perturbed poses to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    scene = make_street_scene(args.scans, density=args.density, mover_speed=args.mover_speed,
                              mover_label=args.mover_label, seed=args.seed)
    lpio.write_sequence(args.out, scene.scans, scene.poses, scene.labels,
                        meta={"generator": "synthetic street", "seed": args.seed})
    print(f"wrote {len(scene)} scans to {args.out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "export-train": cmd_export_train,
            "eval": cmd_eval, "subsample-beams": cmd_subsample_beams,
            "perturb-poses": cmd_perturb_poses, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\n{parser.format_usage().strip()}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, InvalidParameterError, LabelMappingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ContractViolation) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (BackendError, IncompleteCoverageError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
