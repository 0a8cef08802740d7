import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from zoro_mpc.config import generate_reference  # noqa: E402
from zoro_mpc.model import DiffDriveParams, DiscretizationParams  # noqa: E402
from zoro_mpc.ocp import Obstacle, OcpSpec, Weights, reference_window  # noqa: E402
from zoro_mpc.tube import NoiseModel, feedback_gain  # noqa: E402
from zoro_mpc.zoro_solver import TubeModel, ZoroSettings  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

W_DIAG = np.array([0.006 ** 2] * 3 + [0.06 ** 2] * 2)

_CRITERIA = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


def make_spec(N=20, obstacles=(), weights=None, **kw):
    weights = weights or Weights.diagonal([10, 10, 1, 0.1, 0.1], [0.1, 0.1])
    return OcpSpec(N=N, weights=weights, obstacles=obstacles, **kw)


def make_tube(W_diag=W_DIAG, sigma0=None, dt=0.05, tau=0.1):
    W = NoiseModel.diagonal(W_diag)
    sigma0 = W.W if sigma0 is None else sigma0
    return TubeModel(feedback_gain(DiffDriveParams(tau), DiscretizationParams(dt)), W, sigma0)


@pytest.fixture
def line_ref():
    return generate_reference("line", {"speed": 1.0, "duration": 10.0})


@pytest.fixture
def spec():
    return make_spec()


@pytest.fixture
def obstacle_spec():
    return make_spec(obstacles=(Obstacle(3.0, 0.9, 0.5),))


@pytest.fixture
def tube():
    return make_tube()


@pytest.fixture
def zero_tube():
    return TubeModel.zero()


@pytest.fixture
def zsettings():
    return ZoroSettings()


def window_at(ref, t, N=20):
    return reference_window(ref, t, N)
