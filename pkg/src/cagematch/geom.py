"""Geometry kernels: Chamfer distance, nearest neighbours, sampling, transforms, cropping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import tensor as T
from .tensor import Tensor


class PreconditionError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    source_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise PreconditionError(f"points must have shape (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise PreconditionError("point cloud must hold at least one point")
        if not np.all(np.isfinite(self.points)):
            raise PreconditionError("point coordinates must be finite")
        if self.source_ids is not None:
            self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
            if self.source_ids.shape != (len(self.points),):
                raise PreconditionError("source_ids must have one entry per point")
            if len(np.unique(self.source_ids)) != len(self.source_ids):
                raise PreconditionError("source_ids must be unique")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OcclusionMask:
    keep: np.ndarray
    plane: Optional[tuple] = None

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.sum() < int(np.ceil(0.05 * len(self.keep))):
            raise PreconditionError("mask keeps fewer than 5% of the points")

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def _pts(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def nearest(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index of the nearest ``ref`` point for every ``query`` point (KD-tree)."""
    _, idx = cKDTree(ref).query(query, k=1)
    return np.asarray(idx, dtype=np.int64)


def chamfer(a, b) -> Tensor:
    """Bidirectional mean squared nearest-neighbour distance.

    Gradients flow into whichever argument is a Tensor through the nearest
    correspondence, which is held fixed.
    """
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise PreconditionError("chamfer needs two nonempty clouds")
    ta, tb = T.as_tensor(a.points if isinstance(a, PointCloud) else a), \
        T.as_tensor(b.points if isinstance(b, PointCloud) else b)
    ab = nearest(pa, pb)
    ba = nearest(pb, pa)
    d_ab = T.reduce_sum(T.square(ta - T.take(tb, ab)), axis=-1)
    d_ba = T.reduce_sum(T.square(tb - T.take(ta, ba)), axis=-1)
    return T.reduce_mean(d_ab) + T.reduce_mean(d_ba)


def chamfer_value(a, b) -> float:
    return float(chamfer(_pts(a), _pts(b)).data)


def nearest_mean_per_region(tgt, seg: np.ndarray, src, min_mass: float = 1e-6):
    """Soft-weighted mean nearest distance from target points to ``src`` per part.

    Returns ``(D, degenerate)``; parts whose soft mass is below ``min_mass`` get
    ``D = 0`` and ``degenerate = True``.
    """
    pt, ps = _pts(tgt), _pts(src)
    seg = np.asarray(seg.data if isinstance(seg, Tensor) else seg, dtype=np.float64)
    if seg.shape[0] != len(pt):
        raise PreconditionError("segmentation rows must match target points")
    if len(ps) == 0:
        raise PreconditionError("source cloud is empty")
    idx = nearest(pt, ps)
    d = np.sqrt(((pt - ps[idx]) ** 2).sum(axis=1))
    mass = seg.sum(axis=0)
    degenerate = mass < min_mass
    D = np.where(degenerate, 0.0, (seg * d[:, None]).sum(axis=0) / np.where(degenerate, 1.0, mass))
    return D, degenerate


def fps_indices(points, k: int, seed: int) -> np.ndarray:
    """Greedy farthest-point order starting from the point farthest from a seeded probe."""
    pts = _pts(points)
    n = len(pts)
    if k > n:
        raise PreconditionError(f"cannot sample {k} points from {n}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    if k == 0:
        return chosen
    # the seeded probe only selects which extreme point starts the sequence
    probe = pts[rng.integers(n)]
    chosen[0] = int(np.argmax(((pts - probe) ** 2).sum(axis=1)))
    dist = np.full(n, np.inf)
    for i in range(1, k):
        dist = np.minimum(dist, ((pts - pts[chosen[i - 1]]) ** 2).sum(axis=1))
        chosen[i] = int(np.argmax(dist))
    return chosen


def fps(cloud: PointCloud, k: int, seed: int) -> PointCloud:
    """Farthest-point subset with a seeded first pick."""
    idx = fps_indices(cloud.points, k, seed)
    ids = idx if cloud.source_ids is None else cloud.source_ids[idx]
    return PointCloud(cloud.points[idx], ids)


# -- transforms ---------------------------------------------------------------
@dataclass
class SimilarityTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float | np.ndarray = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        R = self.rotation
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-6 or abs(np.linalg.det(R) - 1) >= 1e-6:
            raise PreconditionError("rotation must be orthonormal with det +1")
        if self.scale.shape not in ((), (3,)) or np.any(self.scale <= 0):
            raise PreconditionError("scale must be a positive scalar or 3-vector")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        if self.scale.ndim:
            raise PreconditionError("anisotropic transforms have no similarity inverse")
        s = float(self.scale)
        Rt = self.rotation.T
        return SimilarityTransform(Rt, -(Rt @ self.translation) / s, 1.0 / s)

    def compose(self, first: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying ``first`` and then ``self``."""
        if self.scale.ndim or first.scale.ndim:
            raise PreconditionError("composition needs scalar scales")
        s = float(self.scale) * float(first.scale)
        R = self.rotation @ first.rotation
        t = float(self.scale) * (self.rotation @ first.translation) + self.translation
        return SimilarityTransform(R, t, s)


def apply_transform(cloud: PointCloud, t: SimilarityTransform) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.source_ids)


def euler_rotation(angles) -> np.ndarray:
    """Rotation from extrinsic XYZ Euler angles in radians."""
    return Rotation.from_euler("xyz", np.asarray(angles, dtype=np.float64)).as_matrix()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def rotz(deg: float) -> np.ndarray:
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


# -- occlusion ------------------------------------------------------------------
def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def crop_count(n: int, rate: float) -> int:
    return max(_round_half_up((1.0 - rate) * n), int(np.ceil(0.05 * n)))


def plane_crop(cloud: PointCloud, occlusion_rate: float, seed: int):
    """Remove the ``occlusion_rate`` fraction of points beyond a random plane.

    Returns the surviving cloud (original order, ``source_ids`` carried over or
    created) and the keep mask over the input. The mask carries the realized
    plane as ``(normal, offset)``; survivors satisfy ``p . normal < offset``.
    """
    if not 0.0 <= occlusion_rate <= 0.95:
        raise PreconditionError(f"occlusion rate {occlusion_rate} outside [0, 0.95]")
    n = len(cloud)
    ids = cloud.source_ids if cloud.source_ids is not None else np.arange(n)
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    keep_n = crop_count(n, occlusion_rate)
    h = cloud.points @ normal
    order = np.argsort(h, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:keep_n]] = True
    if keep_n < n:
        offset = 0.5 * (h[order[keep_n - 1]] + h[order[keep_n]])
    else:
        offset = h.max() + 1.0
    out = PointCloud(cloud.points[keep], ids[keep])
    return out, OcclusionMask(keep, (normal, float(offset)))
