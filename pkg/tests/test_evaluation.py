import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelprop3d.errors import InvalidParameterError, LabelMappingError
from labelprop3d.evaluation import (IGNORE, ConfusionMatrix, LabelSetMapping, accumulate,
                                    beam_subsample, builtin_label_sets, evaluate, infer_beams,
                                    iou_per_class, load_label_set, metric_name, miou,
                                    parse_keep_pattern, remap)
from labelprop3d.synthetic import make_ring_scan

BUILTIN = ["sk_sp", "sk_ps", "sk_ns", "sk_w", "sk_pl3d", "ns_sp", "ns_ps", "ns_w", "ns_pl3d"]


def test_hand_computed_example():
    mapping = LabelSetMapping.identity(["a", "b"])
    cm = accumulate(ConfusionMatrix(2), mapping.remap_ground_truth([1, 1, 2, 2]),
                    mapping.remap_predictions([1, 2, 2, 2]))
    iou = iou_per_class(cm)
    assert abs(iou[0] - 0.5) < 1e-12 and abs(iou[1] - 2 / 3) < 1e-12
    assert abs(miou(cm) - 7 / 12) < 1e-12
    assert cm.matrix.tolist() == [[1, 1], [0, 2]]


def test_perfect_prediction():
    cm = ConfusionMatrix(3).update([0, 1, 1, 2], [0, 1, 1, 2])
    assert cm.miou() == 1.0


def test_absent_class_excluded_and_fp_class_counted():
    cm = ConfusionMatrix(3).update([0, 0], [0, 2])
    iou = cm.iou()
    assert np.isnan(iou[1]) and iou[2] == 0.0
    assert cm.miou() == 0.25


def test_ignored_ground_truth_not_counted():
    cm = ConfusionMatrix(2).update([IGNORE, 0, 1], [1, 0, IGNORE])
    assert cm.total == 2 and cm.missed.tolist() == [0, 1]
    assert cm.iou()[1] == 0.0


def test_length_mismatch():
    with pytest.raises(InvalidParameterError):
        ConfusionMatrix(2).update([0, 1], [0])


def test_merge_is_sum(rng):
    a = ConfusionMatrix(4).update(rng.integers(-1, 4, 50), rng.integers(-1, 4, 50))
    b = ConfusionMatrix(4).update(rng.integers(-1, 4, 50), rng.integers(-1, 4, 50))
    c = a + b
    assert np.array_equal(c.matrix, a.matrix + b.matrix) and c.total == a.total + b.total


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 8))
def test_properties(seed, k):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(-1, k, 200), rng.integers(-1, k, 200)
    cm = ConfusionMatrix(k).update(gt, pred)
    assert cm.total == np.count_nonzero(gt != IGNORE)
    iou = cm.iou()
    assert np.all((iou[~np.isnan(iou)] >= 0) & (iou[~np.isnan(iou)] <= 1))
    # relabelling classes consistently leaves mIoU unchanged
    perm = rng.permutation(k)
    lut = lambda a: np.where(a == IGNORE, IGNORE, perm[np.maximum(a, 0)])
    cm2 = ConfusionMatrix(k).update(lut(gt), lut(pred))
    assert cm.miou() == pytest.approx(cm2.miou(), abs=1e-12)
    if np.any(gt != IGNORE):
        assert ConfusionMatrix(k).update(gt, gt).miou() == 1.0


def test_remap():
    assert remap([1, 2, 3], {1: 0, 2: 1, 3: 2}).tolist() == [0, 1, 2]
    with pytest.raises(LabelMappingError):
        remap([4], {1: 0})


def test_two_source_ids_merge():
    sps = load_label_set("SK∩PS")
    two = sps.classes.index("2-wheeled")
    # SemanticKITTI bicycle (2) and motorcycle (3)
    assert sps.remap_predictions([2, 3]).tolist() == [two, two]


@pytest.mark.parametrize("name", BUILTIN)
def test_builtin_sets_are_total(name):
    mapping = load_label_set(name)
    k = 19 if name.startswith("sk") else 16
    assert set(mapping.prediction_map) == set(range(k + 1))
    assert mapping.prediction_map[0] == IGNORE
    targets = set(mapping.prediction_map.values()) | set(mapping.ground_truth_map.values())
    assert targets - {IGNORE} == set(range(mapping.num_classes))
    assert all(-1 <= v < mapping.num_classes for v in mapping.ground_truth_map.values())
    ids = np.array(sorted(mapping.ground_truth_map))
    assert len(mapping.remap_ground_truth(ids)) == len(ids)


def test_nine_builtin_sets():
    assert sorted(builtin_label_sets()) == sorted(BUILTIN)


def test_aliases_and_provisional():
    assert load_label_set("L_SK∩W").provisional
    assert not load_label_set("sk_sp").provisional
    with pytest.raises(FileNotFoundError):
        load_label_set("nope")


def test_metric_name_and_report():
    mapping = load_label_set("SK∩SP")
    assert metric_name(mapping) == "mIoU^{SemanticPOSS}_{L_SK∩SP}"
    labels = [np.arange(20), np.arange(20)[::-1]]
    report = evaluate(labels, labels, load_label_set("SK∩PL3D"))
    assert report["mIoU"] == 1.0 and report["scans"] == 2 and report["points"] == 38
    assert report["metric"] == "mIoU^{ParisLuco3D}_{L_SK∩PL3D}"


def test_parse_keep_pattern():
    assert parse_keep_pattern("even") == (2, 0)
    assert parse_keep_pattern("odd") == (2, 1)
    assert parse_keep_pattern("4:1") == (4, 1)
    for bad in ("x", "2:2", "0", "1:2:3"):
        with pytest.raises(InvalidParameterError):
            parse_keep_pattern(bad)


class TestBeams:
    def test_inference_recovers_rings(self):
        cloud, beams = make_ring_scan()
        assert np.array_equal(infer_beams(cloud.positions), beams)

    def test_keep_even(self):
        cloud, beams = make_ring_scan()
        out, new = beam_subsample(cloud, "even")
        assert len(np.unique(new)) == 32
        assert len(out) == len(cloud) // 2

    def test_order_preserved(self):
        cloud, beams = make_ring_scan(points_per_beam=10)
        tagged = cloud.replace(scan_index=np.arange(len(cloud)))
        out, _ = beam_subsample(tagged, "odd", beam_ids=beams)
        assert np.all(np.diff(out.scan_index) > 0)

    def test_twice_even_is_mod_four(self):
        cloud, beams = make_ring_scan(points_per_beam=10)
        tagged = cloud.replace(scan_index=beams)
        once, ids = beam_subsample(tagged, "even", beam_ids=beams)
        twice, _ = beam_subsample(once, "even", beam_ids=ids)
        assert set(twice.scan_index.tolist()) == set(range(0, 64, 4))
        direct, _ = beam_subsample(tagged, "4:0", beam_ids=beams)
        assert np.array_equal(twice.positions, direct.positions)

    @pytest.mark.parametrize("n_per", [100, 333, 1000])
    def test_count_roughly_halves(self, n_per):
        cloud, _ = make_ring_scan(points_per_beam=n_per)
        out, _ = beam_subsample(cloud, "even")
        assert abs(len(out) - len(cloud) / 2) <= n_per

    def test_ambiguous_warns(self, caplog):
        cloud, _ = make_ring_scan(n_beams=16, points_per_beam=20)
        with caplog.at_level(logging.WARNING):
            infer_beams(cloud.positions, n_beams=64)
        assert "ambiguous" in caplog.text

    def test_beam_id_length_checked(self):
        cloud, _ = make_ring_scan(points_per_beam=4)
        with pytest.raises(InvalidParameterError):
            beam_subsample(cloud, "even", beam_ids=[0, 1])
