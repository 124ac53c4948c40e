"""Canonicalization: pose intrinsics, canonical transform, patch decoder and its losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geom import OcclusionMask, PointCloud, PreconditionError, chamfer
from .nn import init_weight
from .tensor import Tensor
from .vn import EncoderOutput, VnEncoder


@dataclass
class PoseIntrinsics:
    """Forward canonical map ``p_c = s * R @ p + T``.

    ``R`` is normally orthonormal, but the inverse solves with ``R`` rather than
    transposing it so hand-built intrinsics with a general ``R`` still invert.
    """

    R: np.ndarray
    T: np.ndarray
    s: float

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.s = float(self.s)
        if not self.s > 0 or not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.T))):
            raise PreconditionError("intrinsics must be finite with s > 0")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * (points @ self.R.T) + self.T

    def invert(self, canonical: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.R, ((canonical - self.T) / self.s).T).T

    def to_json(self) -> dict:
        return {"R": self.R.reshape(-1).tolist(), "T": self.T.tolist(), "s": self.s}


@dataclass
class CanonResult:
    pose: PoseIntrinsics
    F: Tensor
    F_star: Tensor
    S_c: Tensor
    enc: EncoderOutput


class PatchDecoder:
    """``P`` small MLPs, each folding a ``g x g`` grid on the unit square into 3-D."""

    def __init__(self, code_dim: int, rng: np.random.Generator, patches: int = 8, grid: int = 8,
                 hidden: int = 128):
        self.patches, self.grid = patches, grid
        u = np.linspace(0.0, 1.0, grid)
        uv = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1).reshape(-1, 2)
        self.uv = np.broadcast_to(uv, (patches, grid * grid, 2)).copy()
        P, h = patches, hidden
        self.Wg = init_weight(rng, (P, 2, h), code_dim + 2, np.sqrt(2))
        self.Wc = init_weight(rng, (P, code_dim, h), code_dim + 2, np.sqrt(2))
        self.b0 = Tensor(np.zeros((P, 1, h)), requires_grad=True)
        self.W1 = init_weight(rng, (P, h, h), h, np.sqrt(2))
        self.b1 = Tensor(np.zeros((P, 1, h)), requires_grad=True)
        self.W2 = init_weight(rng, (P, h, 3), h, 0.5)
        self.b2 = Tensor(np.zeros((P, 1, 3)), requires_grad=True)

    @property
    def n_out(self) -> int:
        return self.patches * self.grid ** 2

    def __call__(self, F_star) -> Tensor:
        F_star = T.as_tensor(F_star)
        code = T.reduce_max(F_star, axis=0)
        C = code.shape[0]
        code_b = T.broadcast_to(T.reshape(code, (1, 1, C)), (self.patches, 1, C))
        h = T.matmul(Tensor(self.uv), self.Wg) + T.matmul(code_b, self.Wc) + self.b0
        h = T.leaky_relu(h, 0.2)
        h = T.leaky_relu(T.matmul(h, self.W1) + self.b1, 0.2)
        out = T.matmul(h, self.W2) + self.b2
        return T.reshape(out, (self.n_out, 3))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        names = ("Wg", "Wc", "b0", "W1", "b1", "W2", "b2")
        return {f"{prefix}/{n}": getattr(self, n) for n in names}


class Canonicalizer:
    """Pose-decoupling encoder plus the scale calibration and the training decoder.

    ``calib`` multiplies the raw scale ``mean ||F_hat|| ** -1/2``; it is fitted
    from data by the training loop rather than trained by gradient.
    """

    def __init__(self, rng: np.random.Generator, patches: int = 8, grid: int = 8):
        self.encoder = VnEncoder(rng)
        self.decoder = PatchDecoder(self.encoder.out_dim, rng, patches, grid)
        self.calib = Tensor(np.ones(1))

    def __call__(self, points, edges=None) -> CanonResult:
        return canonicalize(points, self, edges)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        p = f"{prefix}/" if prefix else ""
        out = self.encoder.named_parameters(f"{p}vn")
        out.update(self.decoder.named_parameters(f"{p}canon/decoder"))
        return out

    def buffers(self, prefix: str = "") -> dict[str, Tensor]:
        p = f"{prefix}/" if prefix else ""
        return {f"{p}canon/calib": self.calib}


def canonicalize(points, net: Canonicalizer, edges=None) -> CanonResult:
    """Encode, extract intrinsics and map the cloud into the canonical frame.

    The scale factor enters the canonical cloud as a constant: letting the
    reconstruction loss push on it would shrink the canonical frame to a point.
    The map uses the orthonormalized rotation so crops cannot flatten the
    frame; the orthogonality penalty still acts on the raw estimate.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) < 16:
        raise PreconditionError("canonicalization needs at least 16 points")
    enc = net.encoder(pts, edges)
    s = float(enc.s_raw.data) * float(net.calib.data[0])
    S_c = T.matmul(Tensor(pts) - enc.T_pred, T.transpose(enc.R_ortho)) * s
    R = enc.R_ortho.data
    pose = PoseIntrinsics(R, -s * (R @ enc.T_pred.data), s)
    return CanonResult(pose, enc.F, enc.F_hat, S_c, enc)


def decode(F_star, dec: PatchDecoder) -> Tensor:
    return dec(F_star)


def orth_penalty(R) -> Tensor:
    R = T.as_tensor(R)
    dev = T.matmul(T.transpose(R), R) - np.eye(3)
    return T.reduce_sum(T.square(dev))


def loss_can(S_c, S_c_hat, R) -> Tensor:
    """Chamfer between canonical and reconstructed clouds plus ``||R^T R - I||_F^2``."""
    return chamfer(S_c, S_c_hat) + orth_penalty(R)


def loss_ccan(S_c_partial, S_c_full, mask) -> Tensor:
    """Chamfer between the partial canonical cloud and the masked full one.

    ``mask`` is an :class:`OcclusionMask` over the full cloud or an index array.
    """
    if isinstance(mask, OcclusionMask):
        if len(mask.keep) != S_c_full.shape[0]:
            raise PreconditionError("mask length must equal the full cloud size")
        idx = mask.indices
    else:
        idx = np.asarray(mask, dtype=np.int64)
    if len(idx) == 0:
        raise PreconditionError("mask selects no points")
    return chamfer(S_c_partial, T.take(T.as_tensor(S_c_full), idx))


def loss_stability(S_c_a, S_c_b) -> Tensor:
    """Optional random-pose consistency term (off by default in training)."""
    return chamfer(S_c_a, S_c_b)
