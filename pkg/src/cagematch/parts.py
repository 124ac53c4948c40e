"""Soft part segmentation and part centres over invariant point features."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .geom import PreconditionError, chamfer
from .nn import MLP
from .tensor import Tensor

MIN_MASS = 1e-6


class SegHead(MLP):
    """Per-point part logits; ``segment`` applies the softmax."""

    def __init__(self, in_dim: int, parts: int, rng: np.random.Generator):
        super().__init__([in_dim, 128, 128, 64, parts], rng, in_scale=np.sqrt(in_dim))
        self.parts = parts


class CenterHead(MLP):
    def __init__(self, in_dim: int, parts: int, rng: np.random.Generator):
        super().__init__([in_dim, 128, 128, 64, parts * 3], rng, out_gain=0.5, in_scale=np.sqrt(in_dim))
        self.parts = parts


def point_descriptor(F, S_c) -> Tensor:
    """Invariant features with the canonical coordinates appended, ``(N, C + 3)``.

    The unit-norm feature rows vary little across a shape, so on their own the
    heads cannot tell regions apart. Coordinates enter as data.
    """
    F = T.as_tensor(F)
    S = T.as_tensor(S_c).data
    if S.shape != (F.shape[0], 3):
        raise T.DimensionError(f"canonical cloud {S.shape} vs features {F.shape}")
    return T.concat([F, Tensor(S)], axis=1)


def segment(F, theta_l: SegHead) -> Tensor:
    """Row-stochastic ``(N, M)`` soft assignment."""
    return T.softmax(theta_l(F), axis=-1)


def centers(F, theta_c: CenterHead) -> Tensor:
    """Mean of the per-point centre predictions, shape ``(M, 3)``."""
    per_point = theta_c(F)
    return T.reshape(T.reduce_mean(per_point, axis=0), (theta_c.parts, 3))


def hard_labels(seg) -> np.ndarray:
    return np.asarray(seg.data if isinstance(seg, Tensor) else seg).argmax(axis=1)


def part_mass(seg) -> np.ndarray:
    return np.asarray(seg.data if isinstance(seg, Tensor) else seg).sum(axis=0)


def barycenters(seg, S_c):
    """Mass-normalized soft barycentres and a mask of parts with usable mass."""
    seg, S_c = T.as_tensor(seg), T.as_tensor(S_c)
    mass = seg.data.sum(axis=0)
    valid = mass >= MIN_MASS
    denom = np.where(valid, 0.0, 1.0)[:, None]
    mass_t = T.reshape(T.reduce_sum(seg, axis=0), (-1, 1)) + denom
    B = T.matmul(T.transpose(seg), S_c) / mass_t
    return B, valid


def loss_seg(K, seg, S_c) -> Tensor:
    """``sum_m ||K_m - B_m||_2`` over parts with usable mass."""
    B, valid = barycenters(seg, S_c)
    dist = T.l2_norm_lastdim(T.as_tensor(K) - B, keepdims=False)
    return T.reduce_sum(dist * valid.astype(np.float64))


def loss_compact(seg, S_c) -> Tensor:
    """Soft within-part spread about the barycentres, relative to the total spread.

    ``mean_n sum_m seg[n,m] ||S_c[n] - B_m||^2 / mean_n ||S_c[n] - mean||^2``:
    one for a uniform assignment, smaller as parts become spatially tight. The
    canonical cloud is treated as data here.
    """
    seg = T.as_tensor(seg)
    P = T.as_tensor(S_c).data
    var = float(((P - P.mean(axis=0)) ** 2).sum(axis=1).mean())
    if not var > 0:
        raise PreconditionError("compactness needs a cloud with nonzero spread")
    K, _ = barycenters(seg, Tensor(P))
    # ||p||^2 - 2 p.K + ||K||^2 for all (n, m)
    pk = T.matmul(Tensor(P), T.transpose(K))
    kk = T.reshape(T.reduce_sum(T.square(K), axis=-1), (1, -1))
    d2 = (P * P).sum(axis=1, keepdims=True) - 2.0 * pk + kk
    return T.reduce_mean(T.reduce_sum(seg * d2, axis=-1)) / var


def loss_ccen(K_partial, K_full) -> Tensor:
    return chamfer(K_partial, K_full)


def loss_cseg(seg_full, seg_partial, source_ids, matched: bool = True) -> Tensor:
    """Consistency between the masked full segmentation and the partial one.

    Matched mode is the mean squared difference of rows paired through
    ``source_ids``; unmatched mode treats rows as points in R^M under Chamfer.
    """
    if source_ids is None:
        raise PreconditionError("segmentation consistency needs source_ids")
    ids = np.asarray(source_ids, dtype=np.int64)
    seg_partial = T.as_tensor(seg_partial)
    if len(ids) != seg_partial.shape[0]:
        raise PreconditionError("source_ids must match the partial row count")
    masked = T.take(T.as_tensor(seg_full), ids)
    if not matched:
        return chamfer(masked, seg_partial)
    return T.reduce_mean(T.square(masked - seg_partial))
