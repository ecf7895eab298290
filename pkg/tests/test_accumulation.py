import numpy as np
import pytest

from labelprop3d.accumulation import (PoseNoiseParams, ReferenceCloud, perturb_poses,
                                      push_segmented_scan)
from labelprop3d.errors import ContractViolation, InvalidParameterError
from labelprop3d.geometry import WORLD, RigidPose, ScanCloud


def labeled(points, scan_index, label=9):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    return ScanCloud(points, labels=np.full(n, label), confidences=np.ones(n),
                     scan_index=scan_index, frame=WORLD)


def test_first_push_crops_around_ego(rng):
    pts = rng.uniform(-100, 100, (2000, 3))
    ego = np.array([10.0, -5.0, 0.0])
    ref = push_segmented_scan(ReferenceCloud(), labeled(pts, 0), ego)
    assert ref.scan_indices == [0]
    assert np.all(np.linalg.norm(ref.cloud.positions - ego, axis=1) <= 75.0)
    assert 0 < len(ref) < 2000


def test_fifo_eviction():
    ref = ReferenceCloud(capacity=2)
    for i in range(3):
        ref.push(labeled([[i, 0, 0]], i), [0, 0, 0])
    assert ref.scan_indices == [1, 2]
    assert set(ref.cloud.scan_index.tolist()) == {1, 2}
    # the index no longer sees the evicted point
    assert ref.index.query([0, 0, 0], 0.1) == []


def test_same_cell_points_collapse():
    ref = ReferenceCloud()
    ref.push(labeled([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]], 0), [0, 0, 0])
    assert len(ref) == 1


def test_duplicates_across_scans_are_kept():
    ref = ReferenceCloud()
    ref.push(labeled([[0.01, 0, 0]], 0), [0, 0, 0])
    ref.push(labeled([[0.02, 0, 0]], 1), [0, 0, 0])
    assert len(ref) == 2


def test_window_bound(rng):
    ref = ReferenceCloud(capacity=3)
    sizes = []
    for i in range(8):
        ref.push(labeled(rng.uniform(-5, 5, (200, 3)), i), [0, 0, 0])
        sizes.append(len(ref.window[-1][1]))
        assert len(ref.window) <= 3
        assert len(ref) <= 3 * max(sizes)


def test_rejects_unlabeled_points():
    scan = ScanCloud(np.zeros((2, 3)), labels=[1, -1], confidences=[1, 0], frame=WORLD)
    with pytest.raises(ContractViolation):
        ReferenceCloud().push(scan, [0, 0, 0])


def test_rejects_sensor_frame():
    scan = ScanCloud(np.zeros((1, 3)), labels=[1], confidences=[1])
    with pytest.raises(ContractViolation):
        ReferenceCloud().push(scan, [0, 0, 0])


def test_invalid_capacity():
    with pytest.raises(InvalidParameterError):
        ReferenceCloud(capacity=0)


def test_points_within_range_of_their_own_ego(rng):
    ref = ReferenceCloud(capacity=5, max_range=20.0)
    egos = {}
    for i in range(5):
        ego = np.array([15.0 * i, 0, 0])
        egos[i] = ego
        ref.push(labeled(rng.uniform(-40, 100, (1500, 3)), i), ego)
    cloud = ref.cloud
    for i, ego in egos.items():
        pts = cloud.positions[cloud.scan_index == i]
        assert np.all(np.linalg.norm(pts - ego, axis=1) <= 20.0)


def random_poses(n, rng):
    from scipy.spatial.transform import Rotation
    return [RigidPose(Rotation.random(random_state=int(s)).as_matrix(), rng.normal(0, 5, 3))
            for s in rng.integers(0, 2**31, n)]


def test_zero_noise_is_identity(rng):
    poses = random_poses(10, rng)
    assert perturb_poses(poses, PoseNoiseParams(0.0, 0.0, seed=5)) == poses


def test_noise_is_seeded(rng):
    poses = random_poses(10, rng)
    a = perturb_poses(poses, PoseNoiseParams(0.3, 0.05, seed=1))
    b = perturb_poses(poses, PoseNoiseParams(0.3, 0.05, seed=1))
    c = perturb_poses(poses, PoseNoiseParams(0.3, 0.05, seed=2))
    assert a == b and a != c


def test_translation_noise_mean():
    poses = [RigidPose()] * 1000
    noisy = perturb_poses(poses, PoseNoiseParams(0.5, 0.0, seed=0))
    offsets = np.array([p.translation for p in noisy])
    assert np.all(np.abs(offsets.mean(axis=0)) <= 3 * 0.5 / np.sqrt(1000))
    assert np.allclose(offsets.std(axis=0), 0.5, rtol=0.1)


def test_rotation_noise_angle_distribution():
    poses = [RigidPose()] * 2000
    noisy = perturb_poses(poses, PoseNoiseParams(0.0, 0.02, seed=0))
    angles = np.array([np.arccos(np.clip((np.trace(p.rotation) - 1) / 2, -1, 1)) for p in noisy])
    # |N(0, s)| has mean s * sqrt(2 / pi)
    assert abs(angles.mean() - 0.02 * np.sqrt(2 / np.pi)) < 0.001
    assert all(np.allclose(p.translation, 0) for p in noisy)


def test_negative_sigma_rejected():
    with pytest.raises(InvalidParameterError):
        PoseNoiseParams(-1.0, 0.0)
