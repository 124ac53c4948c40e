"""Cage construction, mean value coordinates and part-centre-driven cage deformation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geom import PreconditionError, chamfer
from .nn import MLP
from .tensor import Tensor

SURFACE_EPS = 1e-7
DET_EPS = 1e-12


class OutOfCageError(ValueError):
    pass


@dataclass
class CageState:
    vertices: np.ndarray
    faces: np.ndarray
    mvc: np.ndarray
    degenerate: bool = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def lattice_cage(lo, hi):
    """Surface nodes of a 3x3x3 lattice over the box ``[lo, hi]``: 26 vertices, 48 triangles."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    index = {}
    verts = []
    for i in range(3):
        for j in range(3):
            for k in range(3):
                if i == j == k == 1:
                    continue
                index[(i, j, k)] = len(verts)
                verts.append(lo + (hi - lo) * np.array([i, j, k]) / 2.0)
    verts = np.array(verts)
    center = (lo + hi) / 2
    faces = []
    for axis in range(3):
        for side in (0, 2):
            a, b = [ax for ax in range(3) if ax != axis]
            for u in range(2):
                for v in range(2):
                    quad, hub = [], 0
                    for q, (du, dv) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
                        key = [0, 0, 0]
                        key[axis], key[a], key[b] = side, u + du, v + dv
                        quad.append(index[tuple(key)])
                        if u + du == 1 and v + dv == 1:
                            hub = q
                    # split through the face centre so the cage keeps the box's mirror symmetries
                    quad = quad[hub:] + quad[:hub]
                    for tri in ((quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])):
                        p0, p1, p2 = verts[list(tri)]
                        n = np.cross(p1 - p0, p2 - p0)
                        if n @ ((p0 + p1 + p2) / 3 - center) < 0:
                            tri = (tri[0], tri[2], tri[1])
                        faces.append(tri)
    return verts, np.array(faces, dtype=np.int64)


def is_closed_oriented(faces) -> bool:
    """Every directed edge appears once and its reverse appears once."""
    edges = {}
    for f in np.asarray(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(int(a), int(b))] = edges.get((int(a), int(b)), 0) + 1
    return all(c == 1 and edges.get((b, a)) == 1 for (a, b), c in edges.items())


def build_cage(points, margin: float = 0.15) -> CageState:
    """Box cage around the cloud's bounding box inflated by ``margin`` per axis extent."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise PreconditionError("cannot build a cage around an empty cloud")
    if margin < 0.05:
        raise PreconditionError("cage margin must be at least 0.05")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ext = hi - lo
    degenerate = bool(np.any(ext < 0.01))
    mid = (lo + hi) / 2
    ext = np.maximum(ext, 0.01)
    lo, hi = mid - ext * (0.5 + margin), mid + ext * (0.5 + margin)
    verts, faces = lattice_cage(lo, hi)
    return CageState(verts, faces, mvc_matrix(pts, verts, faces), degenerate)


def _surface_distance(x: np.ndarray, verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the triangle mesh."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    rel = x[:, None, :] - a[None]
    h = (rel * n).sum(-1)
    proj = x[:, None, :] - h[..., None] * n[None]
    inside = np.ones(h.shape, dtype=bool)
    for p, q in ((a, b), (b, c), (c, a)):
        inside &= (np.cross(q - p, proj - p[None]) * n[None]).sum(-1) >= 0
    best = np.where(inside, np.abs(h), np.inf)
    for p, q in ((a, b), (b, c), (c, a)):
        e = q - p
        t = np.clip(((x[:, None, :] - p[None]) * e).sum(-1) / (e * e).sum(-1), 0, 1)
        closest = p[None] + t[..., None] * e[None]
        best = np.minimum(best, np.linalg.norm(x[:, None, :] - closest, axis=-1))
    return best.min(axis=1)


def _winding(x: np.ndarray, verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    A = verts[faces[:, 0]][None] - x[:, None, :]
    B = verts[faces[:, 1]][None] - x[:, None, :]
    C = verts[faces[:, 2]][None] - x[:, None, :]
    la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (A, B, C))
    num = (A * np.cross(B, C)).sum(-1)
    den = la * lb * lc + (A * B).sum(-1) * lc + (B * C).sum(-1) * la + (C * A).sum(-1) * lb
    return (2 * np.arctan2(num, den)).sum(axis=1) / (4 * np.pi)


def inside_cage(x, verts, faces) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return (_winding(x, verts, faces) > 0.5) & (_surface_distance(x, verts, faces) > SURFACE_EPS)


def mvc_matrix(x, verts, faces) -> np.ndarray:
    """Mean value coordinates of points ``x`` (N, 3) w.r.t. a closed triangle cage.

    Rows sum to one and reproduce their point (linear precision). Raises
    :class:`OutOfCageError` for points on or outside the surface.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    ok = inside_cage(x, verts, faces)
    if not ok.all():
        raise OutOfCageError(f"{int((~ok).sum())} point(s) on or outside the cage")
    D = verts[None] - x[:, None, :]
    d = np.linalg.norm(D, axis=-1)
    u = D / d[..., None]
    uf = u[:, faces]          # (N, F, 3, 3)
    df = d[:, faces]          # (N, F, 3)
    l = np.stack([np.linalg.norm(uf[:, :, (i + 1) % 3] - uf[:, :, (i + 2) % 3], axis=-1)
                  for i in range(3)], axis=-1)
    theta = 2 * np.arcsin(np.clip(l / 2, 0.0, 1.0))
    h = theta.sum(-1) / 2
    sin_t = np.maximum(np.sin(theta), DET_EPS)
    c = np.stack([2 * np.sin(h) * np.sin(h - theta[..., i])
                  / (sin_t[..., (i + 1) % 3] * sin_t[..., (i + 2) % 3]) - 1 for i in range(3)], axis=-1)
    det = np.linalg.det(uf)
    sgn = np.where(det >= 0, 1.0, -1.0)
    s = sgn[..., None] * np.sqrt(np.clip(1 - c * c, 0.0, None))
    use = np.all(np.abs(s) > DET_EPS, axis=-1)
    s_safe = np.where(np.abs(s) > DET_EPS, s, 1.0)
    w = np.zeros((len(x), len(verts)))
    for i in range(3):
        ip, im = (i + 1) % 3, (i + 2) % 3
        num = theta[..., i] - c[..., ip] * theta[..., im] - c[..., im] * theta[..., ip]
        wi = num / (df[..., i] * sin_t[..., ip] * s_safe[..., im])
        wi = np.where(use, wi, 0.0)
        for f in range(len(faces)):
            w[:, faces[f, i]] += wi[:, f]
    return w / w.sum(axis=1, keepdims=True)


def mvc_weights(p, cage: CageState) -> np.ndarray:
    return mvc_matrix(np.asarray(p, dtype=np.float64).reshape(1, 3), cage.vertices, cage.faces)[0]


class InfluenceNet(MLP):
    """Maps concatenated global codes of target and source to an ``(Nc, M)`` matrix."""

    def __init__(self, code_dim: int, n_cage: int, parts: int, rng: np.random.Generator):
        super().__init__([2 * code_dim, 256, 256, 128, n_cage * parts], rng, out_gain=0.1,
                         in_scale=np.sqrt(code_dim))
        self.n_cage, self.parts = n_cage, parts


def global_code(F) -> Tensor:
    return T.reduce_max(T.as_tensor(F), axis=0)


def influence(code_tgt, code_src, theta_I: InfluenceNet) -> Tensor:
    x = T.reshape(T.concat([T.as_tensor(code_tgt), T.as_tensor(code_src)], axis=0), (1, -1))
    return T.reshape(theta_I(x), (theta_I.n_cage, theta_I.parts))


def offset_cage(cage_vertices, I, K_src, K_tgt) -> Tensor:
    """``C + sum_m I[:, m] (K_src[m] - K_tgt[m])^T``."""
    I = T.as_tensor(I)
    delta = T.as_tensor(K_src) - T.as_tensor(K_tgt)
    if I.shape[1] != delta.shape[0]:
        raise T.DimensionError(f"influence {I.shape} vs centres {delta.shape}")
    return T.as_tensor(cage_vertices) + T.matmul(I, delta)


def warp(mvc, cage_new) -> Tensor:
    """Blend the moved cage vertices with the bound coordinates."""
    return T.matmul(Tensor(mvc), T.as_tensor(cage_new))


def displacement(mvc, cage_old, cage_new) -> np.ndarray:
    return np.asarray(mvc) @ (T.as_tensor(cage_new).data - np.asarray(cage_old))


def loss_deform(S_tgt, S_dfm, I, lam: float = 1.0) -> Tensor:
    return chamfer(S_tgt, S_dfm) + lam * T.frobenius(I)
