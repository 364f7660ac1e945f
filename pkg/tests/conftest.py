import numpy as np
import pytest

from semocc.sensor import CameraIntrinsics
from semocc.synth import build_scene, generate_trajectory, render_depth

ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def small_intrinsics():
    return CameraIntrinsics(125.0, 125.0, 80.0, 60.0, 160, 120)


@pytest.fixture(scope="session")
def scene0():
    return build_scene(0)


@pytest.fixture(scope="session")
def scene0_frames(scene0, small_intrinsics):
    scene, _ = scene0
    poses = generate_trajectory(scene, 30)
    return [(render_depth(scene, p, small_intrinsics), p) for p in poses]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
