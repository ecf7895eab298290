import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelprop3d.clustering import ResidualKMeans, extract_residual_clusters, kmeans
from labelprop3d.errors import InvalidParameterError
from labelprop3d.geometry import ScanCloud
from oracles import wcss


def test_single_cluster_is_centroid(rng):
    pts = rng.normal(size=(50, 3))
    res = kmeans(pts, 1)
    assert np.all(res.assignment == 0)
    assert np.allclose(res.centers[0], pts.mean(axis=0))


def test_two_blobs(rng):
    a = rng.normal(0, 0.2, (40, 3))
    b = rng.normal(10, 0.2, (40, 3))
    pts = np.vstack([a, b])
    res = kmeans(pts, 2, seed=3)
    assert len(set(res.assignment[:40])) == 1 and len(set(res.assignment[40:])) == 1
    assert res.assignment[0] != res.assignment[40]
    assert wcss(pts, res.assignment) <= wcss(pts, np.zeros(80, dtype=int))
    assert abs(res.inertia - wcss(pts, res.assignment)) < 1e-9


def test_fewer_points_than_clusters():
    pts = np.array([[0.0, 0, 0], [5, 0, 0], [0, 5, 0]])
    res = kmeans(pts, 20)
    assert res.n_clusters == 3 and sorted(res.assignment.tolist()) == [0, 1, 2]


def test_empty_input():
    res = kmeans(np.zeros((0, 3)), 5)
    assert res.n_clusters == 0 and len(res.assignment) == 0


def test_invalid_k():
    with pytest.raises(InvalidParameterError):
        kmeans(np.zeros((3, 3)), 0)


def test_duplicate_points_do_not_break(rng):
    pts = np.repeat(rng.normal(size=(2, 3)), 10, axis=0)
    res = kmeans(pts, 5)
    assert np.all(np.isfinite(res.centers))
    assert len(res.assignment) == 20


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 25), st.integers(1, 120))
def test_lloyd_properties(seed, k, n):
    pts = np.random.default_rng(seed).normal(0, 3, (n, 3))
    res = kmeans(pts, k, seed=seed)
    again = kmeans(pts, k, seed=seed)
    assert np.array_equal(res.assignment, again.assignment)
    history = np.array(res.inertia_history)
    assert np.all(np.diff(history) <= 1e-9 * max(1.0, history[0]))
    # every point sits with its nearest center, lowest id on ties
    d2 = np.sum((pts[:, None] - res.centers[None]) ** 2, axis=2)
    assert np.array_equal(res.assignment, np.argmin(d2, axis=1))
    for c in np.unique(res.assignment):
        assert np.allclose(res.centers[c], pts[res.assignment == c].mean(axis=0))


def test_sklearn_facade(rng):
    pts = rng.normal(size=(30, 3))
    model = ResidualKMeans(n_clusters=3, random_state=1).fit(pts)
    assert np.array_equal(model.predict(pts), model.labels_)
    assert model.get_params() == {"n_clusters": 3, "max_iter": 50, "random_state": 1}


def test_extract_no_residual():
    cloud = ScanCloud(np.eye(3))
    assert extract_residual_clusters(cloud, np.zeros(3, dtype=bool), 20) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30))
def test_extract_partitions_residual_set(seed, k):
    rng = np.random.default_rng(seed)
    cloud = ScanCloud(rng.uniform(0, 20, (150, 3)), scan_index=4)
    mask = rng.random(150) < 0.4
    clusters = extract_residual_clusters(cloud, mask, k, seed=seed)
    members = np.concatenate([c.seed_indices for c in clusters]) if clusters else np.zeros(0)
    assert sorted(members.tolist()) == np.nonzero(mask)[0].tolist()
    assert len(clusters) <= k
    for i, c in enumerate(clusters):
        assert c.cluster_id == i and c.scan_id == 4 and c.n_seeds > 0
        assert np.array_equal(c.seed_points.positions, cloud.positions[c.seed_indices])


def test_extract_all_residual():
    cloud = ScanCloud(np.random.default_rng(0).uniform(0, 10, (100, 3)))
    clusters = extract_residual_clusters(cloud, np.ones(100, dtype=bool), 20)
    assert sum(c.n_seeds for c in clusters) == 100
