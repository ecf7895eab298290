"""Procedural street scenes for tests, demos and benchmarks.

A sensor drives along a straight street lined with sidewalks, facades,
poles, signs and trees. Every scan resamples the visible surfaces at random,
so consecutive scans sample the same static objects at new positions. Class
surfaces are kept more than 0.3 m apart, which keeps propagation votes from
crossing object boundaries. Labels use SemanticKITTI learning ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import RigidPose, ScanCloud

CAR, ROAD, SIDEWALK, BUILDING, VEGETATION, POLE, TRAFFIC_SIGN = 1, 9, 11, 13, 15, 18, 19
REFLECTIVITY = {CAR: 0.7, ROAD: 0.2, SIDEWALK: 0.35, BUILDING: 0.5, VEGETATION: 0.15,
                POLE: 0.8, TRAFFIC_SIGN: 0.95}
SENSOR_HEIGHT = 1.73


@dataclass
class SceneSequence:
    scans: list[ScanCloud]
    poses: list[RigidPose]
    labels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.scans)


def _plane(rng, n, x, y, z):
    """Uniform samples on an axis-aligned rectangle; one of x/y/z is a scalar."""
    cols = []
    for lim in (x, y, z):
        cols.append(np.full(n, lim) if np.isscalar(lim) else rng.uniform(lim[0], lim[1], n))
    return np.column_stack(cols)


def _count(rng, density, area):
    return int(rng.poisson(density * max(area, 0.0)))


def _box_surface(rng, density, center, size):
    """Samples on the five visible faces (no bottom) of an axis-aligned box."""
    cx, cy, cz = center
    sx, sy, sz = size
    x0, x1, y0, y1, z0, z1 = cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, cz - sz / 2, cz + sz / 2
    parts = [
        _plane(rng, _count(rng, density, sx * sy), (x0, x1), (y0, y1), z1),
        _plane(rng, _count(rng, density, sx * sz), (x0, x1), y0, (z0, z1)),
        _plane(rng, _count(rng, density, sx * sz), (x0, x1), y1, (z0, z1)),
        _plane(rng, _count(rng, density, sy * sz), x0, (y0, y1), (z0, z1)),
        _plane(rng, _count(rng, density, sy * sz), x1, (y0, y1), (z0, z1)),
    ]
    return np.concatenate(parts)


def _sample_world(rng, center_x, view, density, mover_x=None, mover_label=CAR):
    x = (center_x - view, center_x + view)
    pts, lab = [], []

    def add(p, label):
        pts.append(p)
        lab.append(np.full(len(p), label, dtype=np.int64))

    add(_plane(rng, _count(rng, density, 2 * view * 8.0), x, (-4.0, 4.0), 0.0), ROAD)
    for y in ((4.5, 7.0), (-7.0, -4.5)):
        add(_plane(rng, _count(rng, density, 2 * view * 2.5), x, y, 0.0), SIDEWALK)
    for y in (8.0, -8.0):
        add(_plane(rng, _count(rng, density, 2 * view * 5.5), x, y, (0.5, 6.0)), BUILDING)
    first, last = np.ceil((center_x - view) / 10.0), np.floor((center_x + view) / 10.0)
    for k in np.arange(first, last + 1):
        px = 10.0 * k
        n = _count(rng, density, 2 * np.pi * 0.1 * 3.6)
        theta, z = rng.uniform(0, 2 * np.pi, n), rng.uniform(0.4, 4.0, n)
        add(np.column_stack([px + 0.1 * np.cos(theta), 5.5 + 0.1 * np.sin(theta), z]), POLE)
        add(_plane(rng, _count(rng, density, 0.8 * 0.6), (px - 0.4, px + 0.4), 6.0,
                   (3.2, 3.8)), TRAFFIC_SIGN)
        # tree crowns above the opposite sidewalk, shifted half a block
        n = _count(rng, density, 4 * np.pi * 1.2 ** 2)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        add(np.array([px + 5.0, -6.0, 2.6]) + 1.2 * d, VEGETATION)
    if mover_x is not None:
        add(_box_surface(rng, density, (mover_x, -2.0, 1.05), (4.0, 1.8, 1.5)), mover_label)
    return np.concatenate(pts), np.concatenate(lab)


def make_street_scene(n_scans: int = 10, density: float = 6.0, view: float = 20.0,
                      speed: float = 1.0, yaw_rate: float = 0.01, mover_speed: float | None = None,
                      mover_label: int = CAR, seed: int = 0) -> SceneSequence:
    """Generate ``n_scans`` sensor-frame scans of the street and their poses.

    ``mover_speed`` (m/scan) adds a car driving along the road; ``None``
    gives a fully static scene.
    """
    rng = np.random.default_rng(seed)
    scans, poses, labels = [], [], []
    for i in range(n_scans):
        pose = RigidPose(Rotation.from_euler("z", yaw_rate * i).as_matrix(),
                         np.array([speed * i, 0.0, SENSOR_HEIGHT]))
        mover_x = None if mover_speed is None else 5.0 + mover_speed * i
        world, lab = _sample_world(rng, speed * i, view, density, mover_x, mover_label)
        near = np.hypot(world[:, 0] - pose.translation[0], world[:, 1]) <= view
        world, lab = world[near], lab[near]
        local = (world - pose.translation) @ pose.rotation
        refl = np.vectorize(REFLECTIVITY.get)(lab) + rng.normal(0, 0.02, len(lab))
        feats = np.column_stack([np.clip(refl, 0, 1), np.ones(len(lab))])
        # round-trip through float32 so in-memory scans match files written to disk
        local = local.astype(np.float32).astype(np.float64)
        feats = feats.astype(np.float32).astype(np.float64)
        scans.append(ScanCloud(local, feats, scan_index=i, channels=("reflectivity", "occupancy"),
                               ground_truth=lab))
        poses.append(pose)
        labels.append(lab)
    return SceneSequence(scans, poses, labels)


def make_ring_scan(n_beams: int = 64, points_per_beam: int = 360, fov=(-25.0, 3.0),
                   distance: float = 20.0) -> tuple[ScanCloud, np.ndarray]:
    """A spinning-LiDAR-like scan: ``n_beams`` elevation rings of equal size.

    Returns the cloud and the true beam id of each point (0 = lowest ring).
    """
    elev = np.deg2rad(np.linspace(fov[0], fov[1], n_beams))
    az = np.linspace(0, 2 * np.pi, points_per_beam, endpoint=False)
    e, a = np.meshgrid(elev, az, indexing="ij")
    pts = np.column_stack([distance * np.cos(e).ravel() * np.cos(a).ravel(),
                           distance * np.cos(e).ravel() * np.sin(a).ravel(),
                           distance * np.sin(e).ravel()])
    beams = np.repeat(np.arange(n_beams), points_per_beam)
    return ScanCloud(pts), beams
