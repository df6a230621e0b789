import numpy as np
import pytest

from roverbench.geometry import matrix_to_quat, quat_from_yaw, quat_multiply, quat_normalize
from roverbench.terrain import Heightfield
from roverbench.trajectory import Trajectory
from oracles import random_rotation

# criterion number -> one-line PASS/FAIL verdict, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def random_walk(n, seed, rate=10.0, speed=1.0):
    """Smooth planar-ish walk with heading noise, tangent yaw."""
    rng = np.random.default_rng(seed)
    heading = np.cumsum(rng.normal(scale=0.05, size=n))
    step = speed / rate
    xy = np.cumsum(np.c_[np.cos(heading), np.sin(heading)] * step, axis=0)
    z = 0.3 * np.sin(np.arange(n) / 40.0)
    return Trajectory(np.arange(n) / rate, np.c_[xy, z], quat_from_yaw(heading))


def synthetic_pair(seed, n=None):
    """Ground truth plus a rigidly moved, noisy, jittered, gappy estimate."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(50, 501))
    gt = random_walk(n, seed)
    R = random_rotation(rng)
    t = rng.normal(scale=20, size=3)
    keep = np.sort(rng.choice(n, size=n - n // 10, replace=False))
    p = (gt.p[keep] - t) @ R + rng.normal(scale=0.05, size=(len(keep), 3))
    stamps = gt.t[keep] + rng.uniform(-0.005, 0.005, len(keep))
    q = quat_normalize(quat_multiply(matrix_to_quat(R.T), gt.q[keep]))
    return gt, Trajectory(stamps, p, q, "odom")


@pytest.fixture
def flat_heightfield():
    return Heightfield(np.zeros((41, 41)), 1.0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
