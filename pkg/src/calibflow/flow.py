"""Calibration flow fields: construction, rectification, loss functionals, IO.

A calibration flow stores, at the pixel where a LiDAR point lands under the
initial extrinsic, the displacement to where it lands under the true one.
Rectifying the initial projection with that field turns it into 2D-3D
correspondences for PnP.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    PointCloud,
    ProjectedCloud,
    RigidTransform,
    in_bounds,
    pixel_bins,
    project,
    zbuffer_winners,
)
from .pnp import CorrespondenceSet

CFL_MAGIC = b"CFL1"
_HEADER = struct.Struct("<4sII")


@dataclass
class FlowField:
    """``(H, W, 2)`` displacements in pixels plus an ``(H, W)`` 0/1 mask."""

    flow: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.mask.shape != self.flow.shape[:2]:
            raise ValueError("mask shape does not match flow")

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.zeros((height, width), np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def crop(self, x0: int, y0: int, w: int, h: int) -> "FlowField":
        return FlowField(
            self.flow[y0 : y0 + h, x0 : x0 + w].copy(),
            self.mask[y0 : y0 + h, x0 : x0 + w].copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.flow, other.flow) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-9
    alpha: float = 0.25

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")


def flow_from_projections(init: ProjectedCloud, gt: ProjectedCloud) -> FlowField:
    """Ground-truth flow from two projections of the same cloud.

    Pixel ownership follows the initial depth image: the nearest initially
    visible point owns a cell, and the cell stays empty when that point is
    not visible under the true extrinsic.
    """
    field = FlowField.zeros(init.height, init.width)
    win = zbuffer_winners(init)
    win = win[gt.valid[win]]
    if len(win) == 0:
        return field
    b = pixel_bins(init.pixel[win], init.width, init.height)
    field.flow[b[:, 1], b[:, 0]] = gt.pixel[win] - init.pixel[win]
    field.mask[b[:, 1], b[:, 0]] = 1
    return field


def ground_truth_flow(
    cloud: PointCloud,
    intrinsics: CameraIntrinsics,
    t_init: RigidTransform,
    t_gt: RigidTransform,
) -> FlowField:
    """Flow on the initial-projection pixels of points visible under both
    extrinsics. The nearest point (initial depth) owns a shared pixel."""
    return flow_from_projections(
        project(cloud, intrinsics, t_init), project(cloud, intrinsics, t_gt)
    )


def rectify(
    projected: ProjectedCloud,
    flow: FlowField,
    intrinsics: CameraIntrinsics | None = None,
    offset: tuple[int, int] = (0, 0),
) -> CorrespondenceSet:
    """Shift initial projections by the flow at their pixel.

    ``flow`` may cover a crop of the image whose top-left corner sits at
    ``offset = (x0, y0)``; lookups subtract the offset and the rectified
    coordinates come back in full-image pixels. Only the point that owns a
    pixel in the z-buffer is rectified there (the others are hidden in the
    depth image). Points whose initial or rectified pixel leaves the image
    are dropped.
    """
    if intrinsics is not None and (intrinsics.width, intrinsics.height) != (
        projected.width,
        projected.height,
    ):
        raise ValueError("intrinsics do not match projection")
    x0, y0 = offset
    fh, fw = flow.shape
    if x0 < 0 or y0 < 0 or x0 + fw > projected.width or y0 + fh > projected.height:
        raise ValueError(
            f"flow of size {fw}x{fh} at offset {offset} does not fit "
            f"a {projected.width}x{projected.height} image"
        )
    if intrinsics is None:
        intrinsics = _placeholder_intrinsics(projected.width, projected.height)

    win = zbuffer_winners(projected)
    b = pixel_bins(projected.pixel[win], projected.width, projected.height)
    col, row = b[:, 0] - x0, b[:, 1] - y0
    inside = (col >= 0) & (col < fw) & (row >= 0) & (row < fh)
    win, col, row = win[inside], col[inside], row[inside]
    marked = flow.mask[row, col] == 1
    win, col, row = win[marked], col[marked], row[marked]

    rect = projected.pixel[win] + flow.flow[row, col]
    keep = in_bounds(rect, projected.width, projected.height)
    win, rect = win[keep], rect[keep]
    if projected.points is None:
        pts = np.full((len(win), 3), np.nan)
    else:
        pts = projected.points[win]
    return CorrespondenceSet(rect, pts, projected.source_index[win], intrinsics)


def _placeholder_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(1.0, 1.0, width / 2, height / 2, width, height)


# ---------------------------------------------------------------------------
# Loss functionals


def charbonnier(sq_norm, cfg: LossConfig = LossConfig()):
    """Generalized Charbonnier penalty on a squared norm."""
    return (np.asarray(sq_norm, dtype=np.float64) + cfg.epsilon**2) ** cfg.alpha


def photometric_loss(pred: FlowField, gt: FlowField) -> float:
    """Mean L1 flow error over the ground-truth mask."""
    if pred.shape != gt.shape:
        raise ValueError("flow shapes differ")
    m = gt.mask.astype(bool)
    if not m.any():
        raise ValueError("no valid pixels")
    err = np.abs(gt.flow[m] - pred.flow[m]).sum(axis=1)
    return float(err.mean())


def smoothness_map(pred: FlowField, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel neighbour penalty ``D_s``; border pixels skip the missing
    right/down neighbour."""
    F = pred.flow
    D = np.zeros(pred.shape)
    dx = F[:, :-1] - F[:, 1:]
    dy = F[:-1, :] - F[1:, :]
    D[:, :-1] += charbonnier((dx**2).sum(axis=2), cfg)
    D[:-1, :] += charbonnier((dy**2).sum(axis=2), cfg)
    return D


def smoothness_loss(pred: FlowField, gt_mask, cfg: LossConfig = LossConfig()) -> float:
    """Mean smoothness penalty over pixels without ground truth."""
    m = np.asarray(gt_mask).astype(bool)
    if m.shape != pred.shape:
        raise ValueError("mask shape does not match flow")
    free = ~m
    if not free.any():
        raise ValueError("no invalid pixels")
    return float(smoothness_map(pred, cfg)[free].mean())


# ---------------------------------------------------------------------------
# CFL1 files


def encode_cfl(field: FlowField) -> bytes:
    h, w = field.shape
    header = _HEADER.pack(CFL_MAGIC, w, h)
    flow = np.ascontiguousarray(field.flow, dtype="<f4").tobytes()
    mask = np.ascontiguousarray(field.mask, dtype=np.uint8).tobytes()
    return header + flow + mask


def decode_cfl(data: bytes) -> FlowField:
    if len(data) < _HEADER.size:
        raise ValueError("truncated CFL1 header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != CFL_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    n = w * h
    expected = _HEADER.size + 8 * n + n
    if len(data) != expected:
        raise ValueError(
            f"truncated CFL1 payload: expected {expected} bytes, got {len(data)}"
        )
    off = _HEADER.size
    flow = np.frombuffer(data, dtype="<f4", count=2 * n, offset=off).reshape(h, w, 2)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 8 * n).reshape(h, w)
    if np.any(mask > 1):
        raise ValueError("mask bytes must be 0 or 1")
    return FlowField(flow.astype(np.float64), mask.copy())


def write_cfl(path, field: FlowField) -> None:
    Path(path).write_bytes(encode_cfl(field))


def read_cfl(path) -> FlowField:
    return decode_cfl(Path(path).read_bytes())
