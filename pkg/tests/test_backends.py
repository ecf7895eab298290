import struct
import sys

import numpy as np
import pytest

from labelprop3d.backends import (MAGIC, ClusterBatch, ClusterPrediction, ExternalProcessBackend,
                                  GroundTruthOracle, NearestNeighborBaseline, cluster_filename,
                                  export_clusters, import_predictions, make_backend,
                                  read_cluster_file, read_prediction_file, write_cluster_file,
                                  write_prediction_file)
from labelprop3d.clustering import Cluster
from labelprop3d.errors import BackendError, ContractViolation, InvalidParameterError, ProtocolError
from labelprop3d.geometry import WORLD, ScanCloud

CHANNELS = ("reflectivity", "occupancy")


def make_cluster(rng, n_seed=6, n_ctx=10, scan=5, cid=0, ctx_labels=None, gt=True):
    seeds = ScanCloud(rng.uniform(0, 2, (n_seed, 3)), rng.uniform(0, 1, (n_seed, 2)),
                      scan_index=scan, frame=WORLD, channels=CHANNELS,
                      ground_truth=rng.integers(1, 20, n_seed) if gt else None)
    labels = ctx_labels if ctx_labels is not None else rng.integers(1, 20, n_ctx)
    ctx = ScanCloud(rng.uniform(0, 2, (n_ctx, 3)), rng.uniform(0, 1, (n_ctx, 2)), labels=labels,
                    confidences=np.where(np.asarray(labels) >= 1, rng.uniform(0.1, 1, n_ctx), 0),
                    scan_index=rng.integers(0, scan + 1, n_ctx), frame=WORLD, channels=CHANNELS,
                    ground_truth=rng.integers(0, 20, n_ctx) if gt else None)
    ctx_ids = np.where(ctx.scan_index == scan, np.arange(100, 100 + n_ctx), -1)
    return Cluster(np.arange(n_seed), seeds, ctx, ctx_ids, scan, cid)


def test_oracle_copies_ground_truth(rng):
    batch = ClusterBatch([make_cluster(rng)], CHANNELS, 5)
    pred = GroundTruthOracle().segment(batch).validate(batch)
    cluster = batch.clusters[0]
    assert np.array_equal(pred.labels[0], cluster.points.ground_truth)
    assert np.all(pred.confidences[0] == 1.0)


def test_oracle_without_ground_truth(rng):
    batch = ClusterBatch([make_cluster(rng, gt=False, cid=3)], CHANNELS, 5)
    with pytest.raises(BackendError) as err:
        GroundTruthOracle().segment(batch)
    assert err.value.cluster_ids == (3,)


def test_nn_single_context_label(rng):
    cluster = make_cluster(rng, ctx_labels=np.full(10, 13))
    pred = NearestNeighborBaseline().segment(ClusterBatch([cluster]))
    assert np.all(pred.labels[0] == 13)


def test_nn_nearest_and_tie():
    seeds = ScanCloud(np.array([[0.0, 0, 0], [5.0, 0, 0]]), frame=WORLD)
    ctx = ScanCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0], [4.0, 0, 0]]), labels=[12, 9, 3],
                    confidences=[0.5, 0.6, 0.7], frame=WORLD)
    pred = NearestNeighborBaseline().segment(ClusterBatch([Cluster([0, 1], seeds, ctx)]))
    assert pred.labels[0].tolist() == [9, 3, 12, 9, 3]
    assert pred.confidences[0][:2].tolist() == [0.6, 0.7]


def test_nn_empty_context_fallback(rng):
    cluster = make_cluster(rng, n_ctx=0)
    pred = NearestNeighborBaseline().segment(ClusterBatch([cluster]))
    assert pred.labels[0].tolist() == [1] * 6 and np.all(pred.confidences[0] == 0.01)
    custom = NearestNeighborBaseline(9, 0.8).segment(ClusterBatch([cluster]))
    assert np.all(custom.labels[0] == 9) and np.all(custom.confidences[0] == 0.8)


def test_nn_rejects_bad_fallback():
    with pytest.raises(InvalidParameterError):
        NearestNeighborBaseline(0, 0.5)


def test_validate_catches_short_prediction(rng):
    batch = ClusterBatch([make_cluster(rng, cid=2)])
    bad = ClusterPrediction([np.ones(3, dtype=int)], [np.ones(3)])
    with pytest.raises(BackendError) as err:
        bad.validate(batch)
    assert err.value.cluster_ids == (2,)


def test_unknown_channel_rejected():
    with pytest.raises(ContractViolation):
        ClusterBatch([], ("colour",))


def test_features(rng):
    cluster = make_cluster(rng)
    batch = ClusterBatch([cluster], ("occupancy", "reflectivity", "timestamp"), 5)
    f = batch.features(cluster)
    pts = cluster.points
    assert np.all(f[:, 0] == 1)
    assert np.array_equal(f[:, 1], pts.channel("reflectivity"))
    assert np.array_equal(f[:, 2], np.where(pts.scan_index == 5, 1.0, -1.0))
    dropped = ClusterBatch([cluster], ("occupancy", "reflectivity"), 5, reflectivity_dropped=True)
    assert np.all(dropped.features(cluster) == 1)


class TestProtocol:
    def test_cluster_file_round_trip(self, rng, tmp_path):
        pos = rng.normal(size=(20, 3)).astype(np.float32)
        feats = rng.normal(size=(20, 3)).astype(np.float32)
        lab = rng.integers(-1, 30, 20).astype(np.int32)
        conf = rng.random(20).astype(np.float32)
        write_cluster_file(tmp_path / "c.bin", pos, feats, lab, conf)
        back = read_cluster_file(tmp_path / "c.bin")
        assert back["positions"].tobytes() == pos.tobytes()
        assert back["features"].tobytes() == feats.tobytes()
        assert back["labels"].tobytes() == lab.tobytes()
        assert back["confidences"].tobytes() == conf.tobytes()

    def test_header_layout(self, tmp_path):
        write_cluster_file(tmp_path / "c.bin", np.zeros((2, 3)), np.zeros((2, 1)), [1, 2], [1, 1])
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<III", raw[4:16]) == (1, 2, 1)
        assert len(raw) == 16 + 2 * (12 + 4 + 8)

    def test_version_rejected(self, tmp_path):
        write_prediction_file(tmp_path / "p.bin", [1], [1.0])
        raw = bytearray((tmp_path / "p.bin").read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        (tmp_path / "p.bin").write_bytes(bytes(raw))
        with pytest.raises(ProtocolError, match="p.bin"):
            read_prediction_file(tmp_path / "p.bin")

    def test_bad_magic_and_short_file(self, tmp_path):
        (tmp_path / "a.bin").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(ProtocolError, match="magic"):
            read_cluster_file(tmp_path / "a.bin")
        (tmp_path / "b.bin").write_bytes(b"3DL")
        with pytest.raises(ProtocolError, match="b.bin"):
            read_cluster_file(tmp_path / "b.bin")

    def test_truncated_payload(self, tmp_path):
        write_cluster_file(tmp_path / "c.bin", np.zeros((3, 3)), np.zeros((3, 1)), [1] * 3,
                           [1] * 3)
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-1])
        with pytest.raises(ProtocolError):
            read_cluster_file(tmp_path / "c.bin")

    def test_count_mismatch(self, tmp_path):
        write_prediction_file(tmp_path / "p.bin", [1, 2], [1.0, 1.0])
        with pytest.raises(ProtocolError):
            read_prediction_file(tmp_path / "p.bin", expected_count=3)

    def test_filename(self):
        assert cluster_filename(12, 3) == "000012_03.bin"

    def test_export_import_self_labeled(self, rng, tmp_path):
        clusters = [make_cluster(rng, cid=i) for i in range(3)]
        batch = ClusterBatch(clusters, CHANNELS, 5)
        paths = export_clusters(batch, tmp_path)
        assert [p.name for p in paths] == [f"000005_0{i}.bin" for i in range(3)]
        (tmp_path / "predictions").mkdir()
        for p in paths:
            rec = read_cluster_file(p)
            write_prediction_file(tmp_path / "predictions" / p.name, rec["labels"],
                                  rec["confidences"])
        pred = import_predictions(tmp_path, 5)
        for cluster, lab, conf in zip(clusters, pred.labels, pred.confidences):
            pts = cluster.points
            assert np.array_equal(lab, pts.labels)
            assert conf.astype(np.float32).tobytes() == pts.confidences.astype(np.float32).tobytes()

    def test_ground_truth_export_marks_unlabeled(self, rng, tmp_path):
        cluster = make_cluster(rng)
        export_clusters(ClusterBatch([cluster], CHANNELS, 5), tmp_path, labels="ground_truth")
        rec = read_cluster_file(tmp_path / "clusters" / "000005_00.bin")
        gt = cluster.points.ground_truth
        assert np.array_equal(rec["labels"], np.where(gt >= 1, gt, -1))
        assert np.array_equal(rec["confidences"], (gt >= 1).astype(np.float32))

    def test_missing_prediction(self, rng, tmp_path):
        export_clusters(ClusterBatch([make_cluster(rng)], CHANNELS, 5), tmp_path)
        with pytest.raises(ProtocolError, match="missing"):
            import_predictions(tmp_path, 5)


SCRIPT = """
import sys
from pathlib import Path
sys.path.insert(0, {src!r})
from labelprop3d.backends import read_cluster_file, write_prediction_file
root, scan = Path(sys.argv[-2]), int(sys.argv[-1])
(root / "predictions").mkdir(exist_ok=True)
for f in sorted((root / "clusters").glob(f"{{scan:06d}}_*.bin")):
    rec = read_cluster_file(f)
    n = len(rec["labels"])
    write_prediction_file(root / "predictions" / f.name, [{label}] * n, [0.75] * n)
"""


def test_external_process_backend(rng, tmp_path):
    import labelprop3d
    src = str(__import__("pathlib").Path(labelprop3d.__file__).parents[1])
    script = tmp_path / "model.py"
    script.write_text(SCRIPT.format(src=src, label=11))
    backend = ExternalProcessBackend(tmp_path / "work", [sys.executable, str(script)])
    batch = ClusterBatch([make_cluster(rng, cid=i) for i in range(2)], CHANNELS, 5)
    pred = backend.segment(batch)
    assert all(np.all(lab == 11) for lab in pred.labels)
    assert all(np.all(c == 0.75) for c in pred.confidences)


def test_external_process_failure(rng, tmp_path):
    backend = ExternalProcessBackend(tmp_path, [sys.executable, "-c", "import sys; sys.exit(4)"])
    batch = ClusterBatch([make_cluster(rng, cid=7)], CHANNELS, 5)
    with pytest.raises(BackendError) as err:
        backend.segment(batch)
    assert err.value.cluster_ids == (7,)


def test_make_backend(tmp_path):
    assert isinstance(make_backend("oracle"), GroundTruthOracle)
    assert isinstance(make_backend("nn"), NearestNeighborBaseline)
    ext = make_backend(f"external:{tmp_path}")
    assert isinstance(ext, ExternalProcessBackend) and ext.workdir == tmp_path
    with pytest.raises(InvalidParameterError):
        make_backend("kpconv")
