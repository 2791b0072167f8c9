"""Multi-range iterative refinement around a pluggable flow predictor.

Each stage projects the cloud with the current extrinsic, crops a window
around the projected points, asks the stage's predictor for a calibration
flow on that crop, rectifies the projections and re-solves the pose with
RANSAC-EPnP. The result seeds the next stage.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import RansacError, RefinementError
from .flow import FlowField, ground_truth_flow, read_cfl, rectify
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    ProjectedCloud,
    RigidTransform,
    euler_to_rotation,
    project,
    render_depth,
    rotation_to_euler,
)
from .metrics import se3_error, so3_log
from .pnp import RansacConfig, ransac_pnp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageSpec:
    """Perturbation range a stage's predictor was built for."""

    max_translation: float
    max_rotation_deg: float

    @property
    def label(self) -> str:
        return f"+-{self.max_translation:g}m/+-{self.max_rotation_deg:g}deg"


DEFAULT_STAGES = (
    StageSpec(1.5, 20.0),
    StageSpec(1.0, 10.0),
    StageSpec(0.5, 5.0),
    StageSpec(0.2, 2.0),
    StageSpec(0.1, 1.0),
)


@dataclass(frozen=True)
class RefinementConfig:
    stages: tuple[StageSpec, ...] = DEFAULT_STAGES
    n_valid: int = 10
    crop_width: int = 960
    crop_height: int = 320
    ransac: RansacConfig = RansacConfig()

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage required")
        if self.n_valid < 4:
            raise ValueError("n_valid must be at least 4")
        object.__setattr__(self, "stages", tuple(self.stages))


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def offset(self) -> tuple[int, int]:
        return (self.x0, self.y0)

    def slice(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w]


def _round_half_down(x: float) -> int:
    return int(math.ceil(x - 0.5))


def adaptive_crop(
    projected: ProjectedCloud,
    image_size: tuple[int, int],
    crop_size: tuple[int, int],
) -> CropWindow:
    """Window of ``crop_size = (w, h)`` centred on the mean valid projection,
    shifted to lie inside an image of ``image_size = (W, H)``."""
    W, H = image_size
    w, h = crop_size
    if w > W or h > H:
        raise ValueError(f"crop {w}x{h} larger than image {W}x{H}")
    if projected.valid.any():
        cu, cv = projected.pixel[projected.valid].mean(axis=0)
    else:
        cu, cv = W / 2.0, H / 2.0
    x0 = min(max(_round_half_down(cu - w / 2.0), 0), W - w)
    y0 = min(max(_round_half_down(cv - h / 2.0), 0), H - h)
    return CropWindow(x0, y0, w, h)


# ---------------------------------------------------------------------------
# Predictors


@dataclass
class PredictionRequest:
    """Everything a stage predictor may look at.

    ``image`` is opaque (a path, an array, or None). ``cloud``,
    ``intrinsics`` and ``t_current`` are supplied for test doubles that
    compute flow geometrically; a learned predictor would ignore them.
    """

    image: Any
    depth_crop: np.ndarray
    window: CropWindow
    stage: int
    cloud: PointCloud
    intrinsics: CameraIntrinsics
    t_current: RigidTransform
    frame_id: str = "000000"


class FlowPredictor(Protocol):
    def predict(self, request: PredictionRequest) -> FlowField: ...


@dataclass(frozen=True)
class OraclePredictorConfig:
    t_gt: RigidTransform
    noise_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    outlier_radius_px: float = 50.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_sigma_px < 0:
            raise ValueError("noise_sigma_px must be non-negative")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must be in [0, 1)")


class OraclePredictor:
    """Ground-truth flow, optionally corrupted by Gaussian noise and uniform
    outliers on the masked pixels. Noise is seeded per (seed, stage)."""

    def __init__(self, cfg: OraclePredictorConfig):
        self.cfg = cfg

    def predict(self, request: PredictionRequest) -> FlowField:
        cfg = self.cfg
        full = ground_truth_flow(request.cloud, request.intrinsics, request.t_current, cfg.t_gt)
        w = request.window
        field = full.crop(w.x0, w.y0, w.w, w.h)
        if cfg.noise_sigma_px == 0 and cfg.outlier_fraction == 0:
            return field
        rng = np.random.default_rng([cfg.rng_seed, request.stage])
        rows, cols = np.nonzero(field.mask)
        n = len(rows)
        vals = field.flow[rows, cols]
        if cfg.noise_sigma_px > 0:
            vals = vals + rng.normal(0.0, cfg.noise_sigma_px, size=(n, 2))
        if cfg.outlier_fraction > 0:
            hit = rng.random(n) < cfg.outlier_fraction
            r = cfg.outlier_radius_px
            vals[hit] = rng.uniform(-r, r, size=(int(hit.sum()), 2))
        field.flow[rows, cols] = vals
        return field


def exact_oracle(t_gt: RigidTransform) -> OraclePredictor:
    return OraclePredictor(OraclePredictorConfig(t_gt))


class FilePredictor:
    """Reads precomputed flow from ``<directory>/stage<k>_<frame-id>.cfl``.

    A file may cover either the crop or the whole image; full-image fields
    are cropped to the request window.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, stage: int, frame_id: str) -> Path:
        return self.directory / f"stage{stage}_{frame_id}.cfl"

    def predict(self, request: PredictionRequest) -> FlowField:
        field = read_cfl(self.path_for(request.stage, request.frame_id))
        w = request.window
        if field.shape == (w.h, w.w):
            return field
        K = request.intrinsics
        if field.shape == (K.height, K.width):
            return field.crop(w.x0, w.y0, w.w, w.h)
        raise ValueError(
            f"flow file is {field.shape[1]}x{field.shape[0]}, expected crop "
            f"{w.w}x{w.h} or image {K.width}x{K.height}"
        )


# ---------------------------------------------------------------------------
# Refinement


@dataclass
class StageResult:
    stage: int
    pose: RigidTransform
    n_rect: int
    ok: bool
    window: CropWindow | None = None
    n_inliers: int = 0
    reason: str = ""

    def __iter__(self):
        return iter((self.pose, self.n_rect))


def refine_once(
    cloud: PointCloud,
    intrinsics: CameraIntrinsics,
    t_current: RigidTransform,
    predictor: FlowPredictor,
    stage: int,
    cfg: RefinementConfig = RefinementConfig(),
    image: Any = None,
    frame_id: str = "000000",
) -> StageResult:
    """One pass of project, crop, predict, rectify and RANSAC-EPnP.

    ``stage`` is 1-based. With ``n_valid`` or fewer rectified
    correspondences the current pose is passed through with ``ok=False``.
    """
    projected = project(cloud, intrinsics, t_current)
    window = adaptive_crop(
        projected, (intrinsics.width, intrinsics.height), (cfg.crop_width, cfg.crop_height)
    )
    depth = render_depth(projected, intrinsics)
    request = PredictionRequest(
        image=image,
        depth_crop=window.slice(depth),
        window=window,
        stage=stage,
        cloud=cloud,
        intrinsics=intrinsics,
        t_current=t_current,
        frame_id=frame_id,
    )
    flow = predictor.predict(request)
    if flow.shape != (window.h, window.w):
        raise ValueError(
            f"predictor returned {flow.shape[1]}x{flow.shape[0]}, expected {window.w}x{window.h}"
        )
    corr = rectify(projected, flow, intrinsics, offset=window.offset)
    n_rect = len(corr)
    if n_rect <= cfg.n_valid:
        log.info("stage %d: %d rectified correspondences, need > %d", stage, n_rect, cfg.n_valid)
        return StageResult(stage, t_current, n_rect, False, window, reason="insufficient correspondences")
    rcfg = dataclasses.replace(cfg.ransac, rng_seed=cfg.ransac.rng_seed + stage)
    res = ransac_pnp(corr, rcfg)
    log.debug("stage %d: %d rectified, %d inliers", stage, n_rect, len(res.inliers))
    return StageResult(stage, res.pose, n_rect, True, window, n_inliers=len(res.inliers))


def refine_stages(
    cloud: PointCloud,
    intrinsics: CameraIntrinsics,
    t_init: RigidTransform,
    predictors: FlowPredictor | Sequence[FlowPredictor],
    cfg: RefinementConfig = RefinementConfig(),
    image: Any = None,
    frame_id: str = "000000",
) -> list[StageResult]:
    """Run the stages in order and return every attempted stage.

    A stage without enough correspondences, or whose RANSAC fails, stops
    the loop; only a failure in the first stage is an error.
    """
    n_stages = len(cfg.stages)
    if isinstance(predictors, Sequence):
        if len(predictors) != n_stages:
            raise ValueError(f"need {n_stages} predictors, got {len(predictors)}")
        preds = list(predictors)
    else:
        preds = [predictors] * n_stages

    results: list[StageResult] = []
    t_cur = t_init
    for k, pred in enumerate(preds, start=1):
        try:
            res = refine_once(cloud, intrinsics, t_cur, pred, k, cfg, image, frame_id)
        except RansacError as exc:
            if k == 1:
                raise RefinementError("refinement failed") from exc
            results.append(StageResult(k, t_cur, 0, False, reason=str(exc)))
            break
        results.append(res)
        if not res.ok:
            if k == 1:
                raise RefinementError("refinement failed")
            break
        t_cur = res.pose
    return results


def refine_full(
    cloud: PointCloud,
    intrinsics: CameraIntrinsics,
    t_init: RigidTransform,
    predictors: FlowPredictor | Sequence[FlowPredictor],
    cfg: RefinementConfig = RefinementConfig(),
    image: Any = None,
    frame_id: str = "000000",
) -> RigidTransform:
    """Final extrinsic: the pose of the last successful stage."""
    results = refine_stages(cloud, intrinsics, t_init, predictors, cfg, image, frame_id)
    return [r for r in results if r.ok][-1].pose


# ---------------------------------------------------------------------------
# Sequence filtering


@dataclass
class MedianResult:
    pose: RigidTransform
    outliers: list[int]
    distances: np.ndarray

    def __iter__(self):
        return iter((self.pose, self.outliers))


def _rotation_distance(Ra, Rb) -> float:
    return float(np.linalg.norm(so3_log(Ra.T @ Rb)))


def sequence_median(poses: Sequence[RigidTransform], outlier_threshold: float = 0.1) -> MedianResult:
    """Component-wise median extrinsic over a sequence.

    Translation takes the per-axis median. Rotation takes per-angle medians
    of ZYX Euler angles measured relative to the medoid rotation, which
    keeps the angles small and away from gimbal lock. Frames farther than
    ``outlier_threshold`` (se(3) norm) from the median are reported.
    """
    if not poses:
        raise ValueError("empty list")
    Rs = [p.rotation for p in poses]
    D = np.array([[_rotation_distance(a, b) for b in Rs] for a in Rs])
    R_ref = Rs[int(np.argmin(D.sum(axis=1)))]
    angles = np.array([tuple(rotation_to_euler(R_ref.T @ R)) for R in Rs])
    roll, pitch, yaw = np.median(angles, axis=0)
    R_med = R_ref @ euler_to_rotation(roll, pitch, yaw)
    t_med = np.median(np.array([p.translation for p in poses]), axis=0)
    med = RigidTransform(R_med, t_med)
    dist = np.array([se3_error(p, med) for p in poses])
    outliers = [int(i) for i in np.flatnonzero(dist > outlier_threshold)]
    return MedianResult(med, outliers, dist)
