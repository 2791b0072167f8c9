"""Coarse extrinsic from matched 2D/3D instance centroids.

Instances of the same category are ordered left to right in both
modalities (image ``u``, LiDAR lateral ``Y``) and paired in order; when the
counts differ, the order-preserving assignment whose size ranks agree best
is used. The matched centroids then go to P3P (3 or 4 pairs) or to
RANSAC-EPnP (5 or more).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InsufficientDataError
from .geometry import CameraIntrinsics, RigidTransform
from .pnp import (
    CorrespondenceSet,
    RansacConfig,
    p3p,
    p3p_candidates,
    ransac_pnp,
    reprojection_errors,
)

CATEGORIES = ("person", "rider", "car", "truck", "bus", "motorcycle")

# forward-left-up LiDAR: +Y points to the camera's left, so -Y runs with u
DEFAULT_LATERAL_SIGN = -1.0
SEMANTIC_RANSAC = RansacConfig(inlier_threshold_px=8.0)


def centroid_2d(pixels) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        raise ValueError("empty instance")
    return p.mean(axis=0)


def centroid_3d(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("empty instance")
    return p.mean(axis=0)


@dataclass
class Instance:
    category: str
    id: int
    count: int
    centroid: np.ndarray
    members: np.ndarray | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.count < 1:
            raise ValueError("instance count must be at least 1")
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(-1)
        if self.members is not None:
            self.members = np.asarray(self.members, dtype=np.float64).reshape(
                -1, len(self.centroid)
            )

    @classmethod
    def from_members(cls, category: str, id: int, members) -> "Instance":
        m = np.asarray(members, dtype=np.float64)
        c = centroid_2d(m) if m.shape[-1] == 2 else centroid_3d(m)
        return cls(category, id, len(m), c, m)


@dataclass
class InstanceSet:
    instances: list[Instance] = field(default_factory=list)
    dim = 0

    def __post_init__(self):
        for inst in self.instances:
            if len(inst.centroid) != self.dim:
                raise ValueError(f"expected {self.dim}D centroids")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[Instance]:
        return iter(self.instances)

    def by_category(self, category: str) -> list[Instance]:
        return [i for i in self.instances if i.category == category]


class InstanceSet2D(InstanceSet):
    dim = 2


class InstanceSet3D(InstanceSet):
    dim = 3


@dataclass
class MatchedPair:
    category: str
    image: Instance
    lidar: Instance


def _size_ranks(insts: Sequence[Instance]) -> list[int]:
    """Rank by descending member count; equal counts keep their order."""
    order = sorted(range(len(insts)), key=lambda k: (-insts[k].count, k))
    ranks = [0] * len(insts)
    for r, k in enumerate(order):
        ranks[k] = r
    return ranks


def _assign(small_ranks: list[int], large_ranks: list[int]) -> tuple[int, ...]:
    best, best_cost = None, None
    for combo in itertools.combinations(range(len(large_ranks)), len(small_ranks)):
        cost = sum(abs(large_ranks[j] - r) for j, r in zip(combo, small_ranks))
        if best_cost is None or cost < best_cost:
            best, best_cost = combo, cost
    return best


def _match(a: InstanceSet2D, b: InstanceSet3D, lateral_sign: float) -> list[MatchedPair]:
    pairs = []
    for cat in CATEGORIES:
        img = sorted(a.by_category(cat), key=lambda i: i.centroid[0])
        lid = sorted(b.by_category(cat), key=lambda i: lateral_sign * i.centroid[1])
        if not img or not lid:
            continue
        if len(img) == len(lid):
            pairs += [MatchedPair(cat, p, q) for p, q in zip(img, lid)]
        elif len(img) < len(lid):
            picks = _assign(_size_ranks(img), _size_ranks(lid))
            pairs += [MatchedPair(cat, p, lid[j]) for p, j in zip(img, picks)]
        else:
            picks = _assign(_size_ranks(lid), _size_ranks(img))
            pairs += [MatchedPair(cat, img[j], q) for q, j in zip(lid, picks)]
    return pairs


def match_centroids(
    a: InstanceSet2D, b: InstanceSet3D, lateral_sign: float = DEFAULT_LATERAL_SIGN
) -> list[MatchedPair]:
    """Pair 2D and 3D instances category by category.

    Within a category both sides are sorted left to right. If one side has
    more instances, every order-preserving way of placing the smaller side
    into the larger is scored by the summed difference of size ranks
    (pixel count vs point count, largest first, ranked over each full
    category list); the lowest score wins, earliest combination on ties.
    """
    if not len(a) or not len(b):
        raise ValueError("no matches")
    pairs = _match(a, b, lateral_sign)
    if not pairs:
        raise ValueError("no matches")
    return pairs


def _pairs_to_correspondences(pairs, intrinsics) -> CorrespondenceSet:
    pix = np.array([p.image.centroid for p in pairs])
    pts = np.array([p.lidar.centroid for p in pairs])
    return CorrespondenceSet(pix, pts, None, intrinsics)


def _p3p_best_of_four(corr: CorrespondenceSet) -> RigidTransform:
    best, best_err = None, np.inf
    for held in range(4):
        tri = [k for k in range(4) if k != held]
        try:
            pose = p3p(corr.subset(tri), corr.subset([held]))
        except ValueError:
            continue
        err = float(reprojection_errors(pose, corr.points[[held]], corr.pixels[[held]], corr.intrinsics)[0])
        if err < best_err:
            best, best_err = pose, err
    if best is None:
        raise InsufficientDataError("insufficient instances")
    return best


def _member_score(pose: RigidTransform, pairs, intrinsics) -> float:
    """Mean distance from each projected LiDAR member to the nearest image
    member, over pairs that carry members on both sides."""
    dists = []
    for p in pairs:
        if p.image.members is None or p.lidar.members is None:
            continue
        cam = pose.apply(p.lidar.members)
        cam = cam[cam[:, 2] > 0]
        if len(cam) == 0:
            return np.inf
        uv = cam[:, :2] / cam[:, 2:] * [intrinsics.fx, intrinsics.fy] + [intrinsics.cx, intrinsics.cy]
        d = np.linalg.norm(uv[:, None, :] - p.image.members[None, :, :], axis=2)
        dists.append(d.min(axis=1).mean())
    return float(np.mean(dists)) if dists else np.nan


def _p3p_three(corr: CorrespondenceSet, pairs) -> RigidTransform:
    # three centroids fit every P3P root exactly; member masks break the tie
    poses = p3p_candidates(corr)
    if len(poses) > 1:
        scores = [_member_score(T, pairs, corr.intrinsics) for T in poses]
        if not np.isnan(scores[0]):
            return poses[int(np.argmin(scores))]
    return p3p(corr)


def semantic_initialize(
    a: InstanceSet2D,
    b: InstanceSet3D,
    intrinsics: CameraIntrinsics,
    ransac: RansacConfig = SEMANTIC_RANSAC,
    lateral_sign: float = DEFAULT_LATERAL_SIGN,
) -> RigidTransform:
    """Coarse extrinsic from matched instance centroids.

    Three pairs go to P3P (roots ranked by member overlap when masks are
    available), four to P3P over each triple judged on the held-out pair,
    five or more to RANSAC-EPnP.
    """
    pairs = _match(a, b, lateral_sign)
    n = len(pairs)
    if n < 3:
        raise InsufficientDataError("insufficient instances")
    corr = _pairs_to_correspondences(pairs, intrinsics)
    if n == 3:
        return _p3p_three(corr, pairs)
    if n == 4:
        return _p3p_best_of_four(corr)
    return ransac_pnp(corr, ransac).pose


# ---------------------------------------------------------------------------
# Text format: "category id count c1 c2 [c3] [members...]" per line


def format_instances(instances: InstanceSet, with_members: bool = True) -> str:
    lines = [f"# category id count centroid({instances.dim}) [members]"]
    for inst in instances:
        vals = [inst.category, str(inst.id), str(inst.count)]
        vals += [repr(float(c)) for c in inst.centroid]
        if with_members and inst.members is not None:
            vals += [repr(float(v)) for v in inst.members.reshape(-1)]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def parse_instances(text: str, dim: int) -> InstanceSet:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) < 3 + dim:
            raise ValueError(f"line {lineno}: expected at least {3 + dim} fields")
        try:
            ident, count = int(tok[1]), int(tok[2])
            vals = [float(t) for t in tok[3:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        members = None
        if len(vals) > dim:
            extra = vals[dim:]
            if len(extra) != count * dim:
                raise ValueError(
                    f"line {lineno}: {len(extra)} member values for count {count}"
                )
            members = np.array(extra).reshape(count, dim)
        out.append(Instance(tok[0], ident, count, vals[:dim], members))
    cls = InstanceSet2D if dim == 2 else InstanceSet3D
    return cls(out)


def write_instances(path, instances: InstanceSet, with_members: bool = True) -> None:
    Path(path).write_text(format_instances(instances, with_members))


def read_instances(path, dim: int) -> InstanceSet:
    return parse_instances(Path(path).read_text(), dim)
