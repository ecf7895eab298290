import sys

import numpy as np
import pytest

from labelprop3d import io as lpio
from labelprop3d.synthetic import make_street_scene


@pytest.fixture(scope="session")
def static_scene():
    return make_street_scene(10, seed=0)


@pytest.fixture(scope="session")
def moving_scene():
    return make_street_scene(10, mover_speed=1.5, seed=1)


@pytest.fixture(scope="session")
def fixture_sequence(tmp_path_factory):
    """The 5-scan synthetic sequence written to disk in KITTI layout."""
    scene = make_street_scene(5, seed=0)
    root = tmp_path_factory.mktemp("fixture") / "seq"
    lpio.write_sequence(root, scene.scans, scene.poses, scene.labels)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
