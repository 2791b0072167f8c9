"""Rigid transforms, quaternions, Euler angles and pinhole projection.

Conventions used throughout the package:

* A ``RigidTransform`` maps LiDAR coordinates into the camera frame,
  ``P_cam = R @ P_lidar + t``.
* Quaternions are Hamilton, stored as ``(w, x, y, z)`` and canonicalized to
  ``w >= 0``.
* Euler angles are ZYX (yaw about z, then pitch about y, then roll about x),
  so ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-12


def _as_rotation(matrix) -> np.ndarray:
    R = np.array(matrix, dtype=np.float64).reshape(3, 3)
    return R


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element mapping LiDAR points into the camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if not (
            np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL, rtol=0)
            and abs(np.linalg.det(R) - 1.0) <= ORTHO_TOL
        ):
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected 3x4 or 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R @ R.T, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(
        a.rotation @ b.rotation, a.rotation @ b.translation + a.translation
    )


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_to_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues formula."""
    k = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(k)
    if n == 0.0:
        return np.eye(3)
    k = k / n
    K = skew(k)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# Quaternions


@dataclass(frozen=True)
class Quaternion:
    """Hamilton quaternion ``w + xi + yj + zk``.

    Construction does not normalize; use :meth:`canonical` for the ``w >= 0``
    representative of a rotation.
    """

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def canonical(self) -> "Quaternion":
        if self.w < 0:
            return Quaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return quat_mul(self, other)


def quat_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    return Quaternion(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )


def quat_inv(m: Quaternion) -> Quaternion:
    """Conjugate divided by the squared norm."""
    n2 = m.w**2 + m.x**2 + m.y**2 + m.z**2
    if n2 == 0.0:
        raise ValueError("zero norm")
    return Quaternion(m.w / n2, -m.x / n2, -m.y / n2, -m.z / n2)


def rotation_to_quaternion(R) -> Quaternion:
    """Shepperd's method; result is unit norm with ``w >= 0``."""
    R = _as_rotation(R)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    return Quaternion(*map(float, q)).canonical()


def quaternion_to_rotation(q: Quaternion) -> np.ndarray:
    n = q.norm()
    if n == 0.0:
        raise ValueError("zero norm")
    w, x, y, z = q.w / n, q.x / n, q.y / n, q.z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# Euler angles


def atan2_piecewise(y: float, x: float) -> float:
    """Six-branch piecewise arctangent; raises at the origin."""
    if x > 0:
        return math.atan(y / x)
    if x < 0:
        if y >= 0:
            return math.atan(y / x) + math.pi
        return math.atan(y / x) - math.pi
    if y > 0:
        return math.pi / 2
    if y < 0:
        return -math.pi / 2
    raise ValueError("atan2 undefined")


@dataclass(frozen=True)
class EulerAngles:
    roll: float
    pitch: float
    yaw: float
    gimbal_lock: bool = field(default=False, compare=False)

    def __iter__(self):
        return iter((self.roll, self.pitch, self.yaw))


def rotation_to_euler(R) -> EulerAngles:
    """ZYX extraction; at gimbal lock roll is pinned to 0."""
    R = _as_rotation(R)
    r11, r21, r31 = R[0, 0], R[1, 0], R[2, 0]
    r32, r33 = R[2, 1], R[2, 2]
    c = math.hypot(r32, r33)
    pitch = math.atan2(-r31, c)
    if c <= GIMBAL_TOL:
        # only yaw - sign(pitch)*roll is observable; put it all into yaw
        yaw = math.atan2(-R[0, 1], R[1, 1])
        return EulerAngles(0.0, pitch, yaw, gimbal_lock=True)
    yaw = math.atan2(r21, r11)
    roll = math.atan2(r32, r33)
    return EulerAngles(roll, pitch, yaw)


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


# ---------------------------------------------------------------------------
# Camera and clouds


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width), numpy order."""
        return (self.height, self.width)

    def normalize(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=np.float64)
        return np.column_stack(
            [(p[:, 0] - self.cx) / self.fx, (p[:, 1] - self.cy) / self.fy]
        )


@dataclass
class PointCloud:
    """LiDAR points ``(N, 3)`` with optional instance labels and reflectance.

    Label ``-1`` marks points that belong to no instance.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    reflectance: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        n = len(self.points)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if self.reflectance is not None:
            self.reflectance = np.asarray(self.reflectance, dtype=np.float32).reshape(n)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ProjectedCloud:
    """Per-point projection result.

    ``pixel`` keeps continuous coordinates; ``bins`` holds the integer
    ``(col, row)`` cell each valid point falls into.
    """

    pixel: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    source_index: np.ndarray
    width: int
    height: int
    points: np.ndarray | None = None

    @property
    def bins(self) -> np.ndarray:
        return pixel_bins(self.pixel, self.width, self.height)

    def __len__(self) -> int:
        return len(self.depth)


def pixel_bins(pixel, width: int, height: int) -> np.ndarray:
    """Round half down to the integer pixel cell, clamped to the image.

    Clamping only affects coordinates in ``[W - 0.5, W)`` (and likewise for
    rows), which are valid but would otherwise round onto the border.
    """
    p = np.asarray(pixel, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        b = np.ceil(p - 0.5)
    b = np.nan_to_num(b, nan=-1.0, posinf=-1.0, neginf=-1.0)
    col = np.clip(b[:, 0], 0, width - 1).astype(np.int64)
    row = np.clip(b[:, 1], 0, height - 1).astype(np.int64)
    return np.column_stack([col, row])


def in_bounds(pixel, width: int, height: int) -> np.ndarray:
    p = np.asarray(pixel, dtype=np.float64)
    return (p[:, 0] >= 0) & (p[:, 0] < width) & (p[:, 1] >= 0) & (p[:, 1] < height)


def project(
    cloud: PointCloud | np.ndarray,
    intrinsics: CameraIntrinsics,
    extrinsic: RigidTransform,
) -> ProjectedCloud:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    points = points.reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty input")
    cam = extrinsic.apply(points)
    z = cam[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / safe_z + intrinsics.cy
    pixel = np.column_stack([u, v])
    pixel[~front] = np.nan
    valid = front & in_bounds(np.nan_to_num(pixel, nan=-1.0), intrinsics.width, intrinsics.height)
    return ProjectedCloud(
        pixel=pixel,
        depth=z,
        valid=valid,
        source_index=np.arange(len(points)),
        width=intrinsics.width,
        height=intrinsics.height,
        points=points,
    )


def back_project(pixel, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for pixels at the given depths."""
    p = np.asarray(pixel, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = z * (p[:, 0] - intrinsics.cx) / intrinsics.fx
    y = z * (p[:, 1] - intrinsics.cy) / intrinsics.fy
    return np.column_stack([x, y, z])


def zbuffer_winners(projected: ProjectedCloud, mask=None) -> np.ndarray:
    """Indices of the points that own their pixel cell.

    Among valid points (optionally restricted by ``mask``) the smallest depth
    wins each cell; ties go to the lowest source index.
    """
    sel = projected.valid if mask is None else projected.valid & np.asarray(mask, bool)
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        return idx
    bins = pixel_bins(projected.pixel[idx], projected.width, projected.height)
    cell = bins[:, 1] * projected.width + bins[:, 0]
    # lexsort: last key is primary
    order = np.lexsort((projected.source_index[idx], projected.depth[idx], cell))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    return idx[order[first]]


def render_depth(projected: ProjectedCloud, intrinsics: CameraIntrinsics | None = None) -> np.ndarray:
    """Sparse depth image; 0 where no point lands, nearest depth otherwise."""
    width = intrinsics.width if intrinsics else projected.width
    height = intrinsics.height if intrinsics else projected.height
    image = np.zeros((height, width))
    win = zbuffer_winners(projected)
    if len(win):
        b = pixel_bins(projected.pixel[win], width, height)
        image[b[:, 1], b[:, 0]] = projected.depth[win]
    return image
