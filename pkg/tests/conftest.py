import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from calibflow.geometry import CameraIntrinsics, RigidTransform, euler_to_rotation
from calibflow.pnp import CorrespondenceSet

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng, max_angle=0.5, max_t=1.0) -> RigidTransform:
    a = rng.uniform(-max_angle, max_angle, 3)
    return RigidTransform(euler_to_rotation(*a), rng.uniform(-max_t, max_t, 3))


def make_problem(rng, n, K, T=None, planar=False):
    """Points in front of the camera under ``T`` with exact projections."""
    T = T if T is not None else random_pose(rng)
    z = rng.uniform(4.0, 20.0, n)
    u = rng.uniform(50, K.width - 50, n)
    v = rng.uniform(30, K.height - 30, n)
    if planar:
        z = 8.0 + 0.2 * (u - K.cx) / K.fx * 8.0
    cam = np.column_stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])
    pts = (cam - T.translation) @ T.rotation
    proj = pts @ T.rotation.T + T.translation
    pix = np.column_stack(
        [K.fx * proj[:, 0] / proj[:, 2] + K.cx, K.fy * proj[:, 1] / proj[:, 2] + K.cy]
    )
    return CorrespondenceSet(pix, pts, None, K), T


def rot_err_rad(Ra, Rb) -> float:
    """Geodesic distance via atan2 of the skew and symmetric parts."""
    M = np.asarray(Ra).T @ np.asarray(Rb)
    s = np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) / 2
    c = (np.trace(M) - 1) / 2
    return float(np.arctan2(s, c))


@pytest.fixture
def kitti_K():
    return CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
