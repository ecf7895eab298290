"""Cross-dataset scoring: label-set remapping, confusion matrices, IoU/mIoU.

Scores are named ``mIoU^{eval-set}_{label-set}``: the evaluation set is the
dataset the predictions were made on, the label set is the intersection
vocabulary both the model and that dataset can express.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidParameterError, LabelMappingError
from .geometry import ScanCloud

log = logging.getLogger(__name__)

LABELSET_DIR = Path(__file__).parent / "data" / "labelsets"
IGNORE = -1


def _lookup_table(mapping: dict[int, int]) -> tuple[np.ndarray, np.ndarray]:
    keys = np.array(sorted(mapping), dtype=np.int64)
    vals = np.array([mapping[int(k)] for k in keys], dtype=np.int64)
    return keys, vals


@dataclass(frozen=True, eq=False)
class LabelSetMapping:
    """Translation of predictions and ground truth into one shared class list.

    Maps go from an id to a target index in ``0..len(classes)-1`` or to
    ``IGNORE``; ids absent from a map are an error, not silently ignored.
    """

    name: str
    classes: tuple[str, ...]
    prediction_map: dict[int, int]
    ground_truth_map: dict[int, int]
    source: str = ""
    evaluation: str = ""
    provisional: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @classmethod
    def identity(cls, classes, name="identity") -> "LabelSetMapping":
        """Ids 1..K map onto themselves, 0 is ignored."""
        ident = {0: IGNORE, **{i + 1: i for i in range(len(classes))}}
        return cls(name, tuple(classes), ident, dict(ident))

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelSetMapping":
        classes = tuple(str(c) for c in doc["classes"])

        def resolve(table):
            out = {}
            for k, v in table.items():
                if v is None or v == "ignore":
                    out[int(k)] = IGNORE
                elif v in classes:
                    out[int(k)] = classes.index(v)
                else:
                    raise LabelMappingError(f"{doc.get('name')}: target {v!r} is not a class")
            return out

        return cls(str(doc["name"]), classes, resolve(doc["prediction_map"]),
                   resolve(doc["ground_truth_map"]), str(doc.get("source", "")),
                   str(doc.get("evaluation", "")), bool(doc.get("provisional", False)))

    def remap_predictions(self, labels) -> np.ndarray:
        return remap(labels, self.prediction_map, f"{self.name} prediction")

    def remap_ground_truth(self, labels) -> np.ndarray:
        return remap(labels, self.ground_truth_map, f"{self.name} ground truth")


def remap(labels, mapping: dict[int, int], what: str = "label") -> np.ndarray:
    """Translate ids through ``mapping``; undeclared ids raise."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.size == 0:
        return lab.copy()
    keys, vals = _lookup_table(mapping)
    pos = np.clip(np.searchsorted(keys, lab), 0, len(keys) - 1)
    bad = keys[pos] != lab
    if np.any(bad):
        raise LabelMappingError(f"{what} ids {sorted(set(lab[bad].tolist()))} are not declared")
    return vals[pos]


_ALIASES = {"∩": "_", "&": "_", "-": "_", " ": ""}


def _slug(name: str) -> str:
    s = name.strip()
    if s.lower().startswith("l_"):
        s = s[2:]
    for k, v in _ALIASES.items():
        s = s.replace(k, v)
    return s.lower()


def builtin_label_sets() -> list[str]:
    return sorted(p.stem for p in LABELSET_DIR.glob("*.yaml"))


def load_label_set(name_or_path) -> LabelSetMapping:
    """Load ``SK∩SP``/``sk_sp``-style built-in names or a YAML file path."""
    path = Path(name_or_path)
    if not path.is_file():
        path = LABELSET_DIR / f"{_slug(str(name_or_path))}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"unknown label set {name_or_path!r}; built-ins: "
                                f"{', '.join(builtin_label_sets())}")
    return LabelSetMapping.from_dict(yaml.safe_load(path.read_text()))


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions, over the target classes.

    Points whose ground truth is ignored are never counted. Points with a
    valid ground truth but an ignored prediction are kept in ``missed``;
    they are false negatives for their true class.
    """

    num_classes: int
    matrix: np.ndarray = None
    missed: np.ndarray = None

    def __post_init__(self):
        k = int(self.num_classes)
        if self.matrix is None:
            self.matrix = np.zeros((k, k), dtype=np.int64)
        if self.missed is None:
            self.missed = np.zeros(k, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum() + self.missed.sum())

    def update(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if gt.shape != pred.shape:
            raise InvalidParameterError(f"length mismatch: {len(gt)} ground truth vs "
                                        f"{len(pred)} predictions")
        k = self.num_classes
        if np.any(gt >= k) or np.any(pred >= k) or np.any(gt < IGNORE) or np.any(pred < IGNORE):
            raise InvalidParameterError("labels must be target indices or IGNORE")
        scored = gt != IGNORE
        hit = scored & (pred != IGNORE)
        self.matrix += np.bincount(gt[hit] * k + pred[hit], minlength=k * k).reshape(k, k)
        self.missed += np.bincount(gt[scored & (pred == IGNORE)], minlength=k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise InvalidParameterError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.matrix + other.matrix,
                               self.missed + other.missed)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both ground truth and predictions."""
        tp = np.diag(self.matrix).astype(np.float64)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp + self.missed
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if np.any(present) else float("nan")


def accumulate(cm: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    return cm.update(gt, pred)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    return cm.iou()


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def metric_name(mapping: LabelSetMapping | str, eval_set: str | None = None) -> str:
    name = mapping.name if isinstance(mapping, LabelSetMapping) else str(mapping)
    if eval_set is None and isinstance(mapping, LabelSetMapping):
        eval_set = mapping.evaluation
    return f"mIoU^{{{eval_set or 'eval'}}}_{{L_{name}}}"


def evaluate(gt_scans, pred_scans, mapping: LabelSetMapping, eval_set: str | None = None) -> dict:
    """Score paired per-scan label arrays and build a report dictionary."""
    cm = ConfusionMatrix(mapping.num_classes)
    n_scans = 0
    for gt, pred in zip(gt_scans, pred_scans, strict=True):
        cm.update(mapping.remap_ground_truth(gt), mapping.remap_predictions(pred))
        n_scans += 1
    iou = cm.iou()
    return {
        "metric": metric_name(mapping, eval_set),
        "label_set": mapping.name,
        "evaluation_set": eval_set or mapping.evaluation,
        "provisional": mapping.provisional,
        "scans": n_scans,
        "points": cm.total,
        "mIoU": cm.miou(),
        "IoU": {c: (None if np.isnan(v) else float(v)) for c, v in zip(mapping.classes, iou)},
    }


# -- beam subsampling --------------------------------------------------------------

def parse_keep_pattern(keep: str) -> tuple[int, int]:
    """``even`` -> (2, 0), ``odd`` -> (2, 1), ``STEP:OFFSET`` or ``STEP`` otherwise."""
    if keep == "even":
        return 2, 0
    if keep == "odd":
        return 2, 1
    parts = str(keep).split(":")
    try:
        step = int(parts[0])
        offset = int(parts[1]) if len(parts) > 1 else 0
    except ValueError:
        raise InvalidParameterError(f"bad beam pattern {keep!r}; use even, odd or STEP:OFFSET")
    if step < 1 or not 0 <= offset < step or len(parts) > 2:
        raise InvalidParameterError(f"bad beam pattern {keep!r}")
    return step, offset


def infer_beams(positions, n_beams: int = 64) -> np.ndarray:
    """Beam ids from elevation angle, using equal-count bins (ring 0 lowest)."""
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    elev = np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1]))
    order = np.argsort(elev, kind="stable")
    beams = np.empty(n, dtype=np.int64)
    beams[order] = (np.arange(n) * n_beams) // n
    # bins must not split a set of identical elevations
    distinct = len(np.unique(np.round(elev, 9)))
    counts = np.bincount(beams, minlength=n_beams)
    if distinct < n_beams or np.any(counts == 0):
        log.warning("beam inference ambiguous: %d distinct elevations for %d beams",
                    distinct, n_beams)
    else:
        sorted_elev = elev[order]
        sorted_beam = beams[order]
        cut = np.nonzero(np.diff(sorted_beam))[0]
        if np.any(np.isclose(sorted_elev[cut], sorted_elev[cut + 1], rtol=0, atol=1e-9)):
            log.warning("beam inference ambiguous: a ring straddles two elevation bins")
    return beams


def beam_subsample(scan: ScanCloud, keep: str = "even", beam_ids=None,
                   n_beams: int = 64) -> tuple[ScanCloud, np.ndarray]:
    """Keep points of the selected beams, e.g. every other ring of a 64-beam sensor.

    Returns the kept points in input order and their re-indexed beam ids
    (``(beam - offset) // step``), so patterns compose: keeping even beams
    twice keeps the original beams that are 0 mod 4.
    """
    step, offset = parse_keep_pattern(keep)
    beams = (infer_beams(scan.positions, n_beams) if beam_ids is None
             else np.asarray(beam_ids, dtype=np.int64))
    if len(beams) != len(scan):
        raise InvalidParameterError("one beam id per point is required")
    mask = (beams - offset) % step == 0
    return scan.subset(mask), (beams[mask] - offset) // step
