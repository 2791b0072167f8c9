"""Extrinsic error metrics: translation, quaternion angle, Euler, se(3)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    Quaternion,
    RigidTransform,
    compose,
    invert,
    quat_inv,
    quat_mul,
    rotation_to_euler,
    rotation_to_quaternion,
    skew,
)

SE3_CONVENTION = "norm(log(inv(T_pred) @ T_gt))"
_UNIT_TOL = 1e-6
_SMALL_ANGLE = 1e-7


@dataclass
class MetricsReport:
    """Errors of one predicted extrinsic against ground truth.

    Translations in meters, angles in degrees, MRR in percent.
    """

    E_t: float
    E_X: float
    E_Y: float
    E_Z: float
    t_bar: float
    E_R: float
    E_Roll: float
    E_Pitch: float
    E_Yaw: float
    R_bar: float
    MSEE: float | None = None
    MRR: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        doc = {"metrics": self.to_dict(), "se3_convention": SE3_CONVENTION}
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("E_t", self.E_t, "m"),
            ("E_X", self.E_X, "m"),
            ("E_Y", self.E_Y, "m"),
            ("E_Z", self.E_Z, "m"),
            ("t_bar", self.t_bar, "m"),
            ("E_R", self.E_R, "deg"),
            ("E_Roll", self.E_Roll, "deg"),
            ("E_Pitch", self.E_Pitch, "deg"),
            ("E_Yaw", self.E_Yaw, "deg"),
            ("R_bar", self.R_bar, "deg"),
            ("MSEE", self.MSEE, ""),
            ("MRR", self.MRR, "%"),
        ]
        lines = []
        for name, value, unit in rows:
            shown = "n/a" if value is None else f"{value:.6g}"
            lines.append(f"{name:<8} {shown:>14} {unit}")
        return "\n".join(lines)


def translation_error(t_pred: RigidTransform, t_gt: RigidTransform):
    """``(E_t, E_X, E_Y, E_Z, t_bar)`` in meters."""
    d = np.abs(t_pred.translation - t_gt.translation)
    e_t = float(np.linalg.norm(t_pred.translation - t_gt.translation))
    ex, ey, ez = map(float, d)
    return e_t, ex, ey, ez, (ex + ey + ez) / 3.0


def _check_unit(q: Quaternion, name: str):
    if abs(q.norm() - 1.0) > _UNIT_TOL:
        raise ValueError(f"{name} is not a unit quaternion (norm {q.norm():.9g})")


def quaternion_angle_error(
    q_pred: Quaternion, q_gt: Quaternion, convention: str = "geodesic"
) -> float:
    """Angle of ``q_gt * inv(q_pred)`` in degrees.

    ``"half-angle"`` returns ``atan2(|v|, |w|)``, which is half the rotation angle;
    ``"geodesic"`` returns the full rotation angle.
    """
    if convention not in ("geodesic", "half-angle"):
        raise ValueError(f"unknown convention {convention!r}")
    _check_unit(q_pred, "q_pred")
    _check_unit(q_gt, "q_gt")
    m = quat_mul(q_gt, quat_inv(q_pred))
    half = math.atan2(math.sqrt(m.x**2 + m.y**2 + m.z**2), abs(m.w))
    angle = 2.0 * half if convention == "geodesic" else half
    return math.degrees(angle)


def rotation_angle_error(
    t_pred: RigidTransform, t_gt: RigidTransform, convention: str = "geodesic"
) -> float:
    return quaternion_angle_error(
        rotation_to_quaternion(t_pred.rotation),
        rotation_to_quaternion(t_gt.rotation),
        convention,
    )


def euler_error(R_pred, R_gt):
    """Absolute ZYX angles of ``R_pred^-1 @ R_gt`` in degrees, plus their mean."""
    rel = np.asarray(R_pred).T @ np.asarray(R_gt)
    e = rotation_to_euler(rel)
    roll, pitch, yaw = (abs(math.degrees(a)) for a in e)
    return roll, pitch, yaw, (roll + pitch + yaw) / 3.0


# ---------------------------------------------------------------------------
# se(3)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    s = np.linalg.norm(w)
    c = (np.trace(R) - 1.0) / 2.0
    theta = math.atan2(s, c)
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    if math.pi - theta < 1e-6:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return axis * theta
    return w * (theta / s)


def se3_log(T: RigidTransform) -> np.ndarray:
    """Stacked ``(rho, omega)`` twist of ``T``."""
    omega = so3_log(T.rotation)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        half = theta / 2.0
        coef = (1.0 - half / math.tan(half)) / theta**2
        V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    rho = V_inv @ T.translation
    return np.concatenate([rho, omega])


def se3_error(t_pred: RigidTransform, t_gt: RigidTransform) -> float:
    return float(np.linalg.norm(se3_log(compose(invert(t_pred), t_gt))))


def msee(pairs: Iterable[tuple[RigidTransform, RigidTransform]]) -> float:
    """Mean se(3) error over ``(pred, gt)`` pairs."""
    errs = [se3_error(p, g) for p, g in pairs]
    if not errs:
        raise ValueError("empty list")
    return float(np.mean(errs))


def mrr(triples: Iterable[tuple[RigidTransform, RigidTransform, RigidTransform]]) -> float:
    """Mean re-calibration rate in percent over ``(init, pred, gt)`` triples.

    Frames whose initial error is exactly zero are skipped with a warning.
    """
    rates = []
    for i, (init, pred, gt) in enumerate(triples):
        e0 = se3_error(init, gt)
        if e0 == 0.0:
            warnings.warn(f"frame {i}: zero initial se(3) error, skipped", stacklevel=2)
            continue
        rates.append((e0 - se3_error(pred, gt)) / e0 * 100.0)
    if not rates:
        raise ValueError("empty list")
    return float(np.mean(rates))


def evaluate(
    t_pred: RigidTransform,
    t_gt: RigidTransform,
    t_init: RigidTransform | None = None,
    convention: str = "geodesic",
) -> MetricsReport:
    e_t, ex, ey, ez, tb = translation_error(t_pred, t_gt)
    roll, pitch, yaw, rb = euler_error(t_pred.rotation, t_gt.rotation)
    report = MetricsReport(
        E_t=e_t,
        E_X=ex,
        E_Y=ey,
        E_Z=ez,
        t_bar=tb,
        E_R=rotation_angle_error(t_pred, t_gt, convention),
        E_Roll=roll,
        E_Pitch=pitch,
        E_Yaw=yaw,
        R_bar=rb,
        MSEE=se3_error(t_pred, t_gt),
    )
    if t_init is not None and se3_error(t_init, t_gt) > 0:
        report.MRR = mrr([(t_init, t_pred, t_gt)])
    return report


def summarize(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Mean, median and standard deviation of every numeric field."""
    if not reports:
        raise ValueError("empty list")
    out = {}
    for name in MetricsReport.__dataclass_fields__:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            a = np.asarray(vals, dtype=np.float64)
            out[name] = {"mean": float(a.mean()), "median": float(np.median(a)), "std": float(a.std())}
    return out
