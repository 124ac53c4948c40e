"""Vector-neuron layers and the pose-decoupling encoder.

Vector features are Tensors of shape ``(N, channels, 3)``. All layers are
bias-free and positively homogeneous, so rotating the input by ``R``
(``x -> x @ R.T``) rotates every vector output the same way, and scaling the
input by ``lam > 0`` scales every vector output by ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .nn import init_weight
from .tensor import Tensor

K_NEIGHBORS = 8
SLOPE = 0.2
GUARD = 1e-9


def vn_linear(x, W) -> Tensor:
    """``out[n, j] = sum_i W[j, i] * x[n, i]`` for vector features ``x``."""
    x, W = T.as_tensor(x), T.as_tensor(W)
    if x.ndim != 3 or x.shape[2] != 3 or W.shape[1] != x.shape[1]:
        raise T.DimensionError(f"vn_linear: features {x.shape} vs weights {W.shape}")
    h = T.matmul(T.transpose(x, (0, 2, 1)), T.transpose(W))
    return T.transpose(h, (0, 2, 1))


def vn_nonlinear(x, U, slope: float = SLOPE) -> Tensor:
    """Leaky projection onto the half-space of a learned direction.

    Where ``<x, d> < 0`` the component of ``x`` along ``d`` is scaled by
    ``slope``; directions shorter than 1e-9 leave ``x`` unchanged.
    """
    x = T.as_tensor(x)
    d = vn_linear(x, U)
    dnorm = T.l2_norm_lastdim(d)
    dot = (x.data * d.data).sum(axis=-1, keepdims=True)
    mask = ((dot < 0) & (dnorm.data >= GUARD)).astype(np.float64)
    if not mask.any():
        return x
    dhat = d / (dnorm + (1.0 - mask))
    proj = T.reduce_sum(x * dhat, axis=-1, keepdims=True)
    return x - (1.0 - slope) * mask * proj * dhat


class VnMlp:
    """Vector-neuron MLP: channel-mixing layers, each optionally followed by a VN nonlinearity."""

    def __init__(self, widths, rng: np.random.Generator, slope: float = SLOPE, final_act: bool = False):
        self.widths = list(widths)
        self.slope = slope
        self.W, self.U = [], []
        n = len(self.widths) - 1
        for i, (cin, cout) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.W.append(init_weight(rng, (cout, cin), cin))
            act = i < n - 1 or final_act
            self.U.append(init_weight(rng, (cout, cout), cout) if act else None)

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        if h.shape[1] != self.widths[0]:
            raise T.DimensionError(f"VnMlp expects {self.widths[0]} channels, got {h.shape[1]}")
        for W, U in zip(self.W, self.U):
            h = vn_linear(h, W)
            if U is not None:
                h = vn_nonlinear(h, U, self.slope)
        return h

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (W, U) in enumerate(zip(self.W, self.U)):
            out[f"{prefix}/{i}.W"] = W
            if U is not None:
                out[f"{prefix}/{i}.U"] = U
        return out


def lift(points: np.ndarray, k: int = K_NEIGHBORS) -> tuple[np.ndarray, bool]:
    """Per-point neighbourhood edge vectors, shape ``(N, k, 3)``.

    Channel ``j`` of point ``n`` is its ``j``-th nearest neighbour minus the
    mean of the neighbourhood (the point and its ``k`` neighbours). Returns
    the edges and a flag that is True for a degenerate (single-location) cloud.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    kk = min(k, n - 1)
    _, idx = cKDTree(pts).query(pts, k=kk + 1)
    idx = np.asarray(idx).reshape(n, kk + 1)
    # the query point itself is not guaranteed to come first when duplicates exist
    hood = pts[idx]
    local_mean = hood.mean(axis=1, keepdims=True)
    nbrs = np.where((idx[:, :1] == np.arange(n)[:, None]), idx[:, 1:], idx[:, :-1])
    edges = pts[nbrs] - local_mean
    if kk < k:
        edges = np.concatenate([edges, np.zeros((n, k - kk, 3))], axis=1)
    degenerate = bool(np.ptp(pts, axis=0).max() == 0.0)
    return edges, degenerate


def vnt_decouple_translation(points, offset_mlp: VnMlp, edges=None):
    """Predict the translation and return translation-free vector features.

    The translation is the mean of per-point predictions ``p_n + o_n`` where
    the offsets ``o_n`` come from translation-invariant edge features, so a
    global shift of the input shifts ``T_pred`` by exactly that amount. The
    returned features are the edges plus the centred position ``p_n - T_pred``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise ValueError("translation decoupling needs at least 4 points")
    degenerate = False
    if edges is None:
        edges, degenerate = lift(pts)
    V = Tensor(edges)
    offsets = offset_mlp(V)[:, 0, :]
    T_pred = T.reduce_mean(Tensor(pts) + offsets, axis=0)
    centred = T.reshape(Tensor(pts) - T_pred, (len(pts), 1, 3))
    Vp = T.concat([V, centred], axis=1)
    return T_pred, Vp, degenerate


def extract_rotation(Vp, feat_mlp: VnMlp, rot_mlp: VnMlp):
    """Equivariant cues ``V_R`` and the raw (unprojected) 3x3 rotation estimate.

    Rows of ``R`` are the three output vectors of the rotation MLP applied to
    the mean cue, so ``R(x @ Q.T) == R(x) @ Q.T`` and ``R @ p`` is invariant.
    """
    V_R = feat_mlp(Vp)
    cue = T.reduce_mean(V_R, axis=0, keepdims=True)
    R = rot_mlp(cue)[0]
    return R, V_R


def normalize_rotation(R_raw) -> Tensor:
    """Rescale to Frobenius norm ``sqrt(3)``, the norm of any rotation.

    The raw estimate grows linearly with the input scale; after rescaling it is
    scale-free and the orthogonality penalty only sees its shape.
    """
    norm = T.frobenius(R_raw)
    if norm.data <= GUARD:
        raise T.NumericError("rotation estimate vanished")
    return R_raw * (np.sqrt(3.0) / norm)


_LEVI = np.zeros((9, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI[3 * _j + _k, _i], _LEVI[3 * _k + _j, _i] = 1.0, -1.0


def orthonormalize(R) -> Tensor:
    """Gram-Schmidt on the first two rows; the third is their cross product.

    The result is a proper rotation and commutes with right-multiplication by
    any rotation, so the canonical cloud stays pose invariant.
    """
    R = T.as_tensor(R)
    r0, r1 = R[0], R[1]
    n0 = T.frobenius(r0)
    if n0.data <= GUARD:
        raise T.NumericError("first rotation row vanished")
    u0 = r0 / n0
    v1 = r1 - u0 * T.reduce_sum(r1 * u0)
    n1 = T.frobenius(v1)
    if n1.data <= GUARD:
        raise T.NumericError("rotation rows are parallel")
    u1 = v1 / n1
    outer = T.matmul(T.reshape(u0, (3, 1)), T.reshape(u1, (1, 3)))
    u2 = T.matmul(T.reshape(outer, (1, 9)), Tensor(_LEVI))
    return T.concat([T.reshape(u0, (1, 3)), T.reshape(u1, (1, 3)), u2], axis=0)


def invariant_readout(V_R, inv_mlp: VnMlp) -> Tensor:
    """Read each point's cues in a per-point frame built from itself and the mean cue."""
    n, c, _ = V_R.shape
    if c < 3:
        raise T.DimensionError("invariant readout needs at least 3 channels")
    mean = T.broadcast_to(T.reduce_mean(V_R, axis=0, keepdims=True), V_R.shape)
    frame = inv_mlp(T.concat([V_R, mean], axis=1))
    V_inv = T.matmul(V_R, T.transpose(frame, (0, 2, 1)))
    return T.reshape(V_inv, (n, c * 3))


def scale_normalize(F_hat):
    """Unit-normalize rows; returns ``(s, F, zero_rows)``.

    The readout is quadratic in the input scale, so ``s = mean_row_norm ** -1/2``
    is the reciprocal of a length. Rows with norm below 1e-9 stay zero and are
    flagged.
    """
    norms = T.l2_norm_lastdim(F_hat)
    zero = norms.data < GUARD
    F = F_hat / (norms + zero.astype(np.float64))
    mean_norm = T.reduce_mean(norms)
    s = 1.0 / T.sqrt(mean_norm) if mean_norm.data > GUARD else Tensor(1.0)
    return s, F, zero[:, 0]


@dataclass
class EncoderOutput:
    T_pred: Tensor
    R: Tensor
    R_raw: Tensor
    R_ortho: Tensor
    V_R: Tensor
    F_hat: Tensor
    F: Tensor
    s_raw: Tensor
    degenerate: bool
    zero_rows: np.ndarray


class VnEncoder:
    """Translation decoupling, rotation cues, invariant readout and scale normalization."""

    def __init__(self, rng: np.random.Generator, k: int = K_NEIGHBORS, width: int = 64):
        self.k = k
        self.offset = VnMlp([k, 32, 32, 1], rng)
        self.feat = VnMlp([k + 1, 32, width, width], rng, final_act=True)
        self.rot = VnMlp([width, 32, 3], rng)
        self.inv = VnMlp([2 * width, 32, 3], rng)
        self.out_dim = 3 * width

    def __call__(self, points, edges=None) -> EncoderOutput:
        T_pred, Vp, degenerate = vnt_decouple_translation(points, self.offset, edges)
        R_raw, V_R = extract_rotation(Vp, self.feat, self.rot)
        R = normalize_rotation(R_raw)
        R_ortho = orthonormalize(R)
        F_hat = invariant_readout(V_R, self.inv)
        s_raw, F, zero = scale_normalize(F_hat)
        return EncoderOutput(T_pred, R, R_raw, R_ortho, V_R, F_hat, F, s_raw, degenerate, zero)

    def named_parameters(self, prefix: str = "vn") -> dict[str, Tensor]:
        out = {}
        for name in ("offset", "feat", "rot", "inv"):
            out.update(getattr(self, name).named_parameters(f"{prefix}/{name}"))
        return out
