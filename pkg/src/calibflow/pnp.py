"""Perspective-n-Point solvers and a seeded RANSAC wrapper.

``epnp`` follows Lepetit, Moreno-Noguer and Fua: the 3D points are written
as barycentric combinations of control points, the camera-frame control
points are recovered from the null space of a 2n x 12 system, the kernel
weights are refined by Gauss-Newton on the control-point distances, and the
pose comes from an absolute-orientation fit. ``p3p`` is Grunert's quartic.

All solvers work in normalized image coordinates internally; reprojection
errors are reported in pixels.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, InsufficientDataError, RansacError
from .geometry import CameraIntrinsics, RigidTransform

log = logging.getLogger(__name__)

GN_ITERATIONS = 10
GN_TOL = 1e-12
_COLLINEAR_TOL = 1e-10
_PLANAR_TOL = 1e-8


@dataclass
class CorrespondenceSet:
    """Matched image pixels and LiDAR points."""

    pixels: np.ndarray
    points: np.ndarray
    source_index: np.ndarray | None
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.pixels)
        if len(self.points) != n:
            raise ValueError("pixel and point counts differ")
        if self.source_index is None:
            self.source_index = np.arange(n)
        self.source_index = np.asarray(self.source_index, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel coordinates")

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx)
        return CorrespondenceSet(
            self.pixels[idx], self.points[idx], self.source_index[idx], self.intrinsics
        )


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 10
    repeats: int = 5
    inlier_threshold_px: float = 1.0
    rng_seed: int = 0
    refit: bool = True

    def __post_init__(self):
        if self.max_iterations <= 0 or self.repeats <= 0:
            raise ValueError("iteration counts must be positive")
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier threshold must be positive")
        if self.rng_seed < 0:
            raise ValueError("seed must be non-negative")


def reprojection_errors(
    pose: RigidTransform, points, pixels, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Pixel distance between observed and reprojected points; ``inf`` for
    points that land behind the camera."""
    cam = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / zs + intrinsics.cy
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    err = np.hypot(u - px[:, 0], v - px[:, 1])
    return np.where(front, err, np.inf)


def absolute_orientation(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid fit ``dst ~ R @ src + t`` (Kabsch/Horn)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


# ---------------------------------------------------------------------------
# EPnP


def _control_points(Pw: np.ndarray) -> np.ndarray:
    c0 = Pw.mean(axis=0)
    A = Pw - c0
    evals, evecs = np.linalg.eigh(A.T @ A / len(Pw))
    scale = evals[-1]
    if scale <= 0 or evals[-2] <= _COLLINEAR_TOL * scale:
        raise DegenerateError("degenerate")
    planar = evals[0] <= _PLANAR_TOL * scale
    dirs = [2, 1] if planar else [2, 1, 0]
    ctrl = [c0] + [c0 + np.sqrt(evals[k]) * evecs[:, k] for k in dirs]
    return np.array(ctrl)


def _barycentric(Pw: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    B = (ctrl[1:] - ctrl[0]).T
    rhs = (Pw - ctrl[0]).T
    if B.shape[1] == 3:
        a = np.linalg.solve(B, rhs).T
    else:
        a = np.linalg.lstsq(B, rhs, rcond=None)[0].T
    return np.column_stack([1.0 - a.sum(axis=1), a])


def _pair_products(kernel: np.ndarray, n_ctrl: int):
    """Per control-point pair, the Gram matrix of kernel-vector differences."""
    V = kernel.T.reshape(kernel.shape[1], n_ctrl, 3)
    pairs = list(itertools.combinations(range(n_ctrl), 2))
    Q = np.empty((len(pairs), kernel.shape[1], kernel.shape[1]))
    for p, (i, j) in enumerate(pairs):
        D = V[:, i] - V[:, j]
        Q[p] = D @ D.T
    return pairs, Q


def _initial_betas(Q: np.ndarray, rho: np.ndarray, dv_norm: np.ndarray, cw_dist: np.ndarray):
    nk = Q.shape[1]
    cands = []
    # one kernel vector
    b1 = float(dv_norm @ cw_dist / (dv_norm @ dv_norm))
    cands.append(np.r_[b1, np.zeros(nk - 1)])

    def solve(terms):
        L = np.column_stack([Q[:, a, b] * (1 if a == b else 2) for a, b in terms])
        return np.linalg.lstsq(L, rho, rcond=None)[0]

    # two kernel vectors
    if nk >= 2:
        b11, b12, b22 = solve([(0, 0), (0, 1), (1, 1)])
        s = np.sign(b11) or 1.0
        beta = np.zeros(nk)
        beta[0] = np.sqrt(abs(b11))
        beta[1] = np.sqrt(abs(b22)) * (np.sign(b12) * s or 1.0)
        cands.append(beta)
    # three kernel vectors, full products (needs 6 equations)
    if nk >= 3 and len(rho) >= 6:
        x = solve([(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)])
        beta = np.zeros(nk)
        beta[0] = np.sqrt(abs(x[0]))
        if beta[0] > 0:
            beta[1], beta[2] = x[1] / beta[0], x[2] / beta[0]
        cands.append(beta)
    # all kernel vectors, first-row products only
    if nk >= 3:
        x = solve([(0, k) for k in range(nk)])
        beta = np.zeros(nk)
        beta[0] = np.sqrt(abs(x[0]))
        if beta[0] > 0:
            beta[1:] = x[1:] / beta[0]
        cands.append(beta)
    return cands


def _gauss_newton(betas: np.ndarray, Q: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Refine every row of ``betas`` at once; converged rows are frozen."""
    betas = np.array(betas, dtype=np.float64, ndmin=2)
    active = np.ones(len(betas), dtype=bool)
    for _ in range(GN_ITERATIONS):
        b = betas[active]
        Qb = np.einsum("pab,cb->cpa", Q, b)
        r = np.einsum("cpa,ca->cp", Qb, b) - rho
        J = 2.0 * Qb
        g = np.einsum("cpa,cp->ca", J, r)
        JtJ = np.einsum("cpa,cpb->cab", J, J)
        try:
            step = np.linalg.solve(JtJ, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.array([np.linalg.lstsq(Jc, -rc, rcond=None)[0] for Jc, rc in zip(J, r)])
        done = np.linalg.norm(g, axis=1) < GN_TOL
        step[done] = 0.0
        betas[active] = b + step
        done |= np.linalg.norm(step, axis=1) < GN_TOL
        active[np.flatnonzero(active)[done]] = False
        if not active.any():
            break
    return betas


def epnp(corr: CorrespondenceSet, *, return_rms: bool = False):
    """Pose from n >= 4 correspondences.

    With ``return_rms`` the pixel RMS reprojection error over all pairs is
    returned alongside the pose.
    """
    n = len(corr)
    if n < 4:
        raise InsufficientDataError(f"EPnP needs at least 4 pairs, got {n}")
    Pw = corr.points
    xy = corr.intrinsics.normalize(corr.pixels)
    ctrl = _control_points(Pw)
    k = len(ctrl)
    alphas = _barycentric(Pw, ctrl)

    M = np.zeros((2 * n, 3 * k))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xy[:, :1]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * xy[:, 1:]
    _, evecs = np.linalg.eigh(M.T @ M)
    nk = min(4, k)
    kernel = evecs[:, :nk]

    pairs, Q = _pair_products(kernel, k)
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    dv_norm = np.sqrt(Q[:, 0, 0])
    cands = _initial_betas(Q, rho, dv_norm, np.sqrt(rho))

    best, best_key = None, None
    for beta in _gauss_newton(np.array(cands), Q, rho):
        ctrl_c = (kernel @ beta).reshape(k, 3)
        Pc = alphas @ ctrl_c
        if Pc[:, 2].sum() < 0:
            Pc = -Pc
        pose = absolute_orientation(Pw, Pc)
        err = reprojection_errors(pose, Pw, corr.pixels, corr.intrinsics)
        behind = int(np.sum(~np.isfinite(err)))
        finite = err[np.isfinite(err)]
        rms = float(np.sqrt(np.mean(finite**2))) if len(finite) else np.inf
        key = (behind, rms)
        if best_key is None or key < best_key:
            best, best_key = pose, key
    best_err = best_key[1] if best_key[0] == 0 else np.inf
    return (best, best_err) if return_rms else best


# ---------------------------------------------------------------------------
# P3P


def _bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    xy = K.normalize(pixels)
    f = np.column_stack([xy, np.ones(len(xy))])
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _polish_distances(s, a2, b2, c2, ca, cb, cg, iters=5):
    s = np.array(s, dtype=np.float64)
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array(
            [
                s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
                s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
                s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
            ]
        )
        J = np.array(
            [
                [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
            ]
        )
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            break
        s = s + step
        if np.linalg.norm(step) <= 1e-15 * np.linalg.norm(s):
            break
    return s


def p3p_candidates(corr: CorrespondenceSet) -> list[RigidTransform]:
    """All real solutions of Grunert's quartic for exactly three pairs."""
    if len(corr) != 3:
        raise ValueError(f"P3P takes exactly 3 pairs, got {len(corr)}")
    P1, P2, P3 = corr.points
    span = max(np.linalg.norm(P2 - P1), np.linalg.norm(P3 - P1), np.linalg.norm(P3 - P2))
    if span == 0 or np.linalg.norm(np.cross(P2 - P1, P3 - P1)) <= 1e-9 * span**2:
        raise DegenerateError("degenerate")
    j1, j2, j3 = _bearings(corr.pixels, corr.intrinsics)

    a2 = float(np.sum((P2 - P3) ** 2))
    b2 = float(np.sum((P1 - P3) ** 2))
    c2 = float(np.sum((P1 - P2) ** 2))
    ca, cb, cg = float(j2 @ j3), float(j1 @ j3), float(j1 @ j2)

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    bmc = (b2 - c2) / b2
    bma = (b2 - a2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (
        amc**2
        - 1
        + 2 * amc**2 * cb**2
        + 2 * bmc * ca**2
        - 4 * apc * ca * cb * cg
        + 2 * bma * cg**2
    )
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2

    roots = np.roots([A4, A3, A2, A1, A0])
    scale = max(1.0, float(np.max(np.abs(roots)))) if len(roots) else 1.0
    poses = []
    Pw = corr.points
    for r in roots:
        if abs(r.imag) > 1e-6 * scale:
            continue
        v = float(r.real)
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v**2 - 2 * amc * cb * v + 1 + amc) / den
        q = 1 + v**2 - 2 * v * cb
        if q <= 0:
            continue
        s1 = np.sqrt(b2 / q)
        s = _polish_distances((s1, u * s1, v * s1), a2, b2, c2, ca, cb, cg)
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            continue
        Pc = np.array([s[0] * j1, s[1] * j2, s[2] * j3])
        poses.append(absolute_orientation(Pw, Pc))
    return poses


def p3p(
    corr: CorrespondenceSet, disambiguator: CorrespondenceSet | None = None
) -> RigidTransform:
    """Three-point pose. The root with the lowest reprojection error on the
    disambiguating pairs (or on the three pairs themselves) wins."""
    poses = p3p_candidates(corr)
    if not poses:
        raise DegenerateError("no real P3P solution")
    judge = disambiguator if disambiguator is not None and len(disambiguator) else corr
    errs = [
        float(np.mean(reprojection_errors(p, judge.points, judge.pixels, judge.intrinsics)))
        for p in poses
    ]
    return poses[int(np.argmin(errs))]


# ---------------------------------------------------------------------------
# RANSAC


@dataclass
class RansacResult:
    pose: RigidTransform
    inliers: np.ndarray
    hypothesis: int
    refit: bool

    def __iter__(self):
        return iter((self.pose, self.inliers))


def _score(pose, corr, threshold):
    err = reprojection_errors(pose, corr.points, corr.pixels, corr.intrinsics)
    inl = np.flatnonzero(err <= threshold)
    mean = float(err[inl].mean()) if len(inl) else np.inf
    return inl, mean


def ransac_pnp(
    corr: CorrespondenceSet, cfg: RansacConfig = RansacConfig(), sample_size: int = 4
) -> RansacResult:
    """EPnP inside RANSAC: ``repeats`` restarts of ``max_iterations`` draws.

    Hypotheses are ranked by inlier count, then mean inlier error, then draw
    order. The winner is refit on its inliers when ``cfg.refit`` is set and
    the refit does not lose inliers; the returned inliers are always those
    of the returned pose.
    """
    n = len(corr)
    if n < 4:
        raise InsufficientDataError(f"RANSAC-PnP needs at least 4 pairs, got {n}")
    rng = np.random.default_rng(cfg.rng_seed)
    thr = cfg.inlier_threshold_px
    best = None  # (count, mean_err, index, pose, inliers)
    index = 0
    for _ in range(cfg.repeats):
        for _ in range(cfg.max_iterations):
            sample = rng.choice(n, size=sample_size, replace=False)
            h = index
            index += 1
            try:
                pose = epnp(corr.subset(sample))
            except (DegenerateError, np.linalg.LinAlgError):
                continue
            inl, mean = _score(pose, corr, thr)
            key = (-len(inl), mean, h)
            if best is None or key < best[0]:
                best = (key, pose, inl, h)
    if best is None or len(best[2]) < 4:
        raise RansacError("ransac failed")

    _, pose, inl, h = best
    refit = False
    if cfg.refit:
        try:
            cand = epnp(corr.subset(inl))
        except (DegenerateError, np.linalg.LinAlgError):
            cand = None
        if cand is not None:
            cand_inl, _ = _score(cand, corr, thr)
            if len(cand_inl) >= len(inl):
                pose, inl, refit = cand, cand_inl, True
    log.debug("ransac: hypothesis %d, %d/%d inliers, refit=%s", h, len(inl), n, refit)
    return RansacResult(pose, inl, h, refit)
