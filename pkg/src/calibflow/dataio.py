"""KITTI-style file IO, extrinsic perturbations and synthetic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    back_project,
    compose,
    euler_to_rotation,
    invert,
    orthonormalize,
    project,
)
from .semantic_init import (
    CATEGORIES,
    Instance,
    InstanceSet2D,
    InstanceSet3D,
    read_instances,
    write_instances,
)

KITTI_IMAGE_SIZE = (1242, 375)
_ORTHO_CALIB_TOL = 1e-3


# ---------------------------------------------------------------------------
# Velodyne scans


def decode_velodyne(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise ValueError(f"corrupt record: {len(data)} bytes is not a multiple of 16")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), reflectance=rec[:, 3].copy())


def encode_velodyne(cloud: PointCloud) -> bytes:
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.reflectance is not None:
        rec[:, 3] = cloud.reflectance
    return rec.tobytes()


def load_velodyne_bin(path) -> PointCloud:
    return decode_velodyne(Path(path).read_bytes())


def save_velodyne_bin(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_velodyne(cloud))


# ---------------------------------------------------------------------------
# Calibration and pose text files


def _parse_keyed(text: str) -> dict[str, list[float]]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'key: values'")
        key, rest = line.split(":", 1)
        try:
            out[key.strip()] = [float(t) for t in rest.split()]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: non-numeric token ({exc})") from None
    return out


def _transform_from_values(vals, what: str) -> RigidTransform:
    if len(vals) != 12:
        raise ValueError(f"{what}: expected 12 values, got {len(vals)}")
    M = np.array(vals).reshape(3, 4)
    R = M[:, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_CALIB_TOL) or np.linalg.det(R) < 0:
        raise ValueError(f"{what}: rotation is not orthonormal")
    # text files carry ~1e-7 rounding; repair it but keep exact rotations bit-exact
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-12, rtol=0):
        R = orthonormalize(R)
    return RigidTransform(R, M[:, 3])


def parse_calib(text: str, image_size=None) -> tuple[CameraIntrinsics, RigidTransform]:
    """``P2`` gives the intrinsics, ``Tr`` (or ``Tr_velo_to_cam``) the
    LiDAR-to-camera extrinsic. An optional ``image_size: W H`` line sets the
    image dimensions, otherwise ``image_size`` or the KITTI default is used.
    """
    kv = _parse_keyed(text)
    if "P2" not in kv:
        raise KeyError("missing key P2")
    tr_key = "Tr" if "Tr" in kv else "Tr_velo_to_cam" if "Tr_velo_to_cam" in kv else None
    if tr_key is None:
        raise KeyError("missing key Tr")
    P = kv["P2"]
    if len(P) != 12:
        raise ValueError(f"P2: expected 12 values, got {len(P)}")
    P = np.array(P).reshape(3, 4)
    if "image_size" in kv:
        W, H = (int(v) for v in kv["image_size"])
    else:
        W, H = image_size or KITTI_IMAGE_SIZE
    K = CameraIntrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], W, H)
    return K, _transform_from_values(kv[tr_key], tr_key)


def load_calib(path, image_size=None) -> tuple[CameraIntrinsics, RigidTransform]:
    return parse_calib(Path(path).read_text(), image_size)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def format_calib(intrinsics: CameraIntrinsics, extrinsic: RigidTransform) -> str:
    P = np.zeros((3, 4))
    P[:, :3] = intrinsics.K
    return (
        f"P2: {_fmt(P)}\n"
        f"Tr: {_fmt(extrinsic.matrix()[:3])}\n"
        f"image_size: {intrinsics.width} {intrinsics.height}\n"
    )


def save_calib(path, intrinsics: CameraIntrinsics, extrinsic: RigidTransform) -> None:
    Path(path).write_text(format_calib(intrinsics, extrinsic))


def format_pose(T: RigidTransform) -> str:
    return _fmt(T.matrix()[:3]) + "\n"


def parse_poses(text: str) -> list[RigidTransform]:
    """One pose per non-empty line, 12 row-major values of ``[R|t]``."""
    poses = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        poses.append(_transform_from_values(vals, f"pose line {lineno}"))
    return poses


def load_pose(path) -> RigidTransform:
    poses = parse_poses(Path(path).read_text())
    if len(poses) != 1:
        raise ValueError(f"{path}: expected one pose, found {len(poses)}")
    return poses[0]


def save_pose(path, T: RigidTransform) -> None:
    Path(path).write_text(format_pose(T))


# ---------------------------------------------------------------------------
# Perturbations


@dataclass(frozen=True)
class PerturbationRange:
    max_translation: float
    max_rotation_deg: float

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation_deg < 0:
            raise ValueError("ranges must be non-negative")


def sample_perturbation(rng_range: PerturbationRange, seed) -> RigidTransform:
    """Uniform per-axis translation and per-axis ZYX Euler angles."""
    rng = np.random.default_rng(seed)
    x = rng_range.max_translation
    y = math.radians(rng_range.max_rotation_deg)
    t = rng.uniform(-x, x, size=3)
    roll, pitch, yaw = rng.uniform(-y, y, size=3)
    return RigidTransform(euler_to_rotation(roll, pitch, yaw), t)


def perturb(t_gt: RigidTransform, rng_range: PerturbationRange, seed) -> RigidTransform:
    """Initial extrinsic ``dT @ t_gt``."""
    return compose(sample_perturbation(rng_range, seed), t_gt)


# ---------------------------------------------------------------------------
# Synthetic scenes


# nominal rig: LiDAR x forward, y left, z up; camera x right, y down, z forward
NOMINAL_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
NOMINAL_TRANSLATION = np.array([0.0, -0.08, -0.27])


@dataclass(frozen=True)
class SceneSpec:
    points: int = 5000
    depth_min: float = 4.0
    depth_max: float = 50.0
    instances: int = 0
    instance_points: int = 150
    instance_depth: tuple[float, float] = (12.0, 16.0)
    instance_size: float = 1.5
    rig_rotation_deg: float = 5.0
    rig_translation: float = 0.1
    width: int = KITTI_IMAGE_SIZE[0]
    height: int = KITTI_IMAGE_SIZE[1]
    focal: float = 400.0
    on_axis: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.points < 1:
            raise ValueError("point count must be at least 1")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("depth range must be positive and non-empty")
        if self.instances < 0 or (self.instances and self.instance_points < 1):
            raise ValueError("bad instance budget")
        if self.instances * self.instance_points > self.points:
            raise ValueError("instance points exceed the point budget")


@dataclass
class Scene:
    cloud: PointCloud
    instances: InstanceSet3D
    t_gt: RigidTransform
    intrinsics: CameraIntrinsics


def _plausible_extrinsic(rng, spec: SceneSpec) -> RigidTransform:
    a = math.radians(spec.rig_rotation_deg)
    dR = euler_to_rotation(*rng.uniform(-a, a, size=3))
    dt = rng.uniform(-spec.rig_translation, spec.rig_translation, size=3)
    return RigidTransform(dR @ NOMINAL_ROTATION, NOMINAL_TRANSLATION + dt)


def generate_scene(spec: SceneSpec) -> Scene:
    """Random cloud inside the camera frustum of a random near-nominal rig.

    Background points sample pixels uniformly and depths uniformly in
    ``[depth_min, depth_max]``. Instances are compact clusters spread left
    to right across the image at similar depth, each with a category.
    Coordinates are rounded to float32 so a saved archive reloads exactly.
    """
    rng = np.random.default_rng(spec.rng_seed)
    K = CameraIntrinsics(
        spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height
    )
    t_gt = _plausible_extrinsic(rng, spec)
    to_lidar = invert(t_gt)

    n_inst_pts = spec.instances * spec.instance_points
    n_bg = spec.points - n_inst_pts
    if spec.on_axis:
        pix = np.tile([K.cx, K.cy], (n_bg, 1))
    else:
        pix = np.column_stack(
            [rng.uniform(0, spec.width, n_bg), rng.uniform(0, spec.height, n_bg)]
        )
    depth = rng.uniform(spec.depth_min, spec.depth_max, n_bg)
    cam_pts = [back_project(pix, depth, K)]
    labels = [np.full(n_bg, -1)]

    if spec.instances:
        # left-to-right slots with jitter keep image order and lateral order aligned
        slots = (np.arange(spec.instances) + 0.5) / spec.instances
        jitter = rng.uniform(-0.15, 0.15, spec.instances) / spec.instances
        us = (0.08 + 0.84 * (slots + jitter)) * spec.width
        vs = spec.height * rng.uniform(0.4, 0.6, spec.instances)
        for s in range(spec.instances):
            d = rng.uniform(*spec.instance_depth)
            center = back_project([[us[s], vs[s]]], [d], K)[0]
            offs = rng.uniform(-0.5, 0.5, size=(spec.instance_points, 3)) * spec.instance_size
            cam_pts.append(center + offs)
            labels.append(np.full(spec.instance_points, s))

    cam = np.concatenate(cam_pts)
    lidar = to_lidar.apply(cam).astype(np.float32).astype(np.float64)
    label = np.concatenate(labels)
    refl = rng.uniform(0, 1, len(lidar)).astype(np.float32)
    cloud = PointCloud(lidar, label, refl)

    insts = []
    for s in range(spec.instances):
        members = lidar[label == s]
        insts.append(Instance.from_members(CATEGORIES[s % len(CATEGORIES)], s, members))
    return Scene(cloud, InstanceSet3D(insts), t_gt, K)


def derive_instance_set_2d(
    instances: InstanceSet3D,
    intrinsics: CameraIntrinsics,
    t_gt: RigidTransform,
    exact_centroids: bool = False,
) -> InstanceSet2D:
    """Perfect instance masks from projecting each 3D instance.

    Each instance's visible projected pixels become its members; instances
    with nothing visible are dropped. With ``exact_centroids`` the members
    are shifted so their mean equals the projection of the 3D centroid,
    which removes the perspective bias between the two centroids.
    """
    out = []
    for inst in instances:
        if inst.members is None:
            raise ValueError(f"instance {inst.id} has no member points")
        pr = project(inst.members, intrinsics, t_gt)
        pix = pr.pixel[pr.valid]
        if len(pix) == 0:
            continue
        if exact_centroids:
            c = project(inst.centroid[None, :], intrinsics, t_gt)
            if not c.valid[0]:
                continue
            pix = pix - pix.mean(axis=0) + c.pixel[0]
        out.append(Instance.from_members(inst.category, inst.id, pix))
    return InstanceSet2D(out)


# ---------------------------------------------------------------------------
# Scene archives


def save_scene(directory, scene: Scene) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_velodyne_bin(d / "cloud.bin", scene.cloud)
    save_calib(d / "calib.txt", scene.intrinsics, scene.t_gt)
    write_instances(d / "instances3d.txt", scene.instances)
    save_pose(d / "gt_pose.txt", scene.t_gt)
    return d


def load_scene(directory) -> Scene:
    d = Path(directory)
    cloud = load_velodyne_bin(d / "cloud.bin")
    K, t_calib = load_calib(d / "calib.txt")
    gt_path = d / "gt_pose.txt"
    t_gt = load_pose(gt_path) if gt_path.exists() else t_calib
    inst_path = d / "instances3d.txt"
    insts = read_instances(inst_path, 3) if inst_path.exists() else InstanceSet3D([])
    return Scene(cloud, insts, t_gt, K)
