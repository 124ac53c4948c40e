"""Procedural box-assembly furniture: tables, chairs and cabinets.

Each shape is a union of closed boxes. Part metadata (one entry per box) is
kept for evaluation only; training never sees it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import PointCloud, PreconditionError, euler_rotation

FAMILIES = ("table", "chair", "cabinet")
N_POINTS = 2500

# (low, high) per parameter; y is up.
PARAM_RANGES = {
    "table": {
        "top_w": (0.8, 1.6), "top_d": (0.5, 1.0), "top_t": (0.03, 0.10),
        "leg_h": (0.4, 0.9), "leg_t": (0.03, 0.12), "leg_inset": (0.0, 0.15),
    },
    "chair": {
        "seat_w": (0.4, 0.7), "seat_d": (0.4, 0.7), "seat_t": (0.03, 0.08),
        "leg_h": (0.3, 0.6), "leg_t": (0.03, 0.08),
        "back_h": (0.3, 0.8), "back_t": (0.03, 0.08), "back_tilt": (0.0, 0.35),
    },
    "cabinet": {
        "body_w": (0.4, 1.2), "body_d": (0.3, 0.7), "body_h": (0.5, 1.6),
        "top_over": (0.0, 0.05), "plinth_h": (0.03, 0.12), "door_t": (0.01, 0.04),
        "n_doors": (1, 2),
    },
}

# unit cube corners and outward-oriented triangles
_CORNERS = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
_BOX_FACES = np.array([
    [0, 1, 3], [0, 3, 2],  # x-
    [4, 6, 7], [4, 7, 5],  # x+
    [0, 4, 5], [0, 5, 1],  # y-
    [2, 3, 7], [2, 7, 6],  # y+
    [0, 2, 6], [0, 6, 4],  # z-
    [1, 5, 7], [1, 7, 3],  # z+
])


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_part: np.ndarray = field(default=None)


@dataclass
class Shape:
    family: str
    params: dict
    mesh: Mesh
    cloud: PointCloud
    labels: np.ndarray
    parts: list


def sample_params(family: str, rng: np.random.Generator) -> dict:
    if family not in PARAM_RANGES:
        raise PreconditionError(f"unknown family {family!r}")
    out = {}
    for name, (lo, hi) in PARAM_RANGES[family].items():
        if isinstance(lo, int) and isinstance(hi, int):
            out[name] = int(rng.integers(lo, hi + 1))
        else:
            out[name] = float(rng.uniform(lo, hi))
    return out


def _check(family: str, params: dict) -> None:
    ranges = PARAM_RANGES[family]
    if set(params) != set(ranges):
        raise PreconditionError(f"{family} expects parameters {sorted(ranges)}")
    for name, (lo, hi) in ranges.items():
        if not lo <= params[name] <= hi:
            raise PreconditionError(f"{family}.{name}={params[name]} outside [{lo}, {hi}]")


def _box(center, size, tilt: float = 0.0, pivot=None):
    v = _CORNERS * np.asarray(size)
    if tilt:
        R = euler_rotation([tilt, 0.0, 0.0])
        piv = np.zeros(3) if pivot is None else np.asarray(pivot) - np.asarray(center)
        v = (v - piv) @ R.T + piv
    return v + np.asarray(center)


def _table(p):
    w, d, t, h, lt = p["top_w"], p["top_d"], p["top_t"], p["leg_h"], p["leg_t"]
    boxes = [("top", _box([0, h + t / 2, 0], [w, t, d]))]
    ix = w / 2 - lt / 2 - p["leg_inset"] * w / 2
    iz = d / 2 - lt / 2 - p["leg_inset"] * d / 2
    for k, (sx, sz) in enumerate([(-1, -1), (1, -1), (-1, 1), (1, 1)]):
        boxes.append((f"leg{k}", _box([sx * ix, h / 2, sz * iz], [lt, h, lt])))
    return boxes


def _chair(p):
    w, d, t, h, lt = p["seat_w"], p["seat_d"], p["seat_t"], p["leg_h"], p["leg_t"]
    boxes = [("seat", _box([0, h + t / 2, 0], [w, t, d]))]
    ix, iz = w / 2 - lt / 2, d / 2 - lt / 2
    for k, (sx, sz) in enumerate([(-1, -1), (1, -1), (-1, 1), (1, 1)]):
        boxes.append((f"leg{k}", _box([sx * ix, h / 2, sz * iz], [lt, h, lt])))
    bh, bt = p["back_h"], p["back_t"]
    base = [0, h + t, -d / 2 + bt / 2]
    boxes.append(("back", _box([0, h + t + bh / 2, -d / 2 + bt / 2], [w, bh, bt],
                               tilt=-p["back_tilt"], pivot=base)))
    return boxes


def _cabinet(p):
    w, d, h = p["body_w"], p["body_d"], p["body_h"]
    ph, o, dt = p["plinth_h"], p["top_over"], p["door_t"]
    boxes = [
        ("plinth", _box([0, ph / 2, 0], [w * 0.9, ph, d * 0.9])),
        ("body", _box([0, ph + h / 2, 0], [w, h, d])),
        ("top", _box([0, ph + h + 0.01, 0], [w + 2 * o, 0.02, d + 2 * o])),
    ]
    n = p["n_doors"]
    dw = w / n
    for k in range(n):
        cx = -w / 2 + dw * (k + 0.5)
        boxes.append((f"door{k}", _box([cx, ph + h / 2, d / 2 + dt / 2], [dw * 0.96, h * 0.96, dt])))
    return boxes


_BUILDERS = {"table": _table, "chair": _chair, "cabinet": _cabinet}


def _sample_surface(mesh: Mesh, n: int, rng: np.random.Generator):
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    f = rng.choice(len(tri), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return pts, mesh.face_part[f]


def gen_shape(family: str, params: dict, seed: int, n_points: int = N_POINTS) -> Shape:
    """Build the mesh and a normalized area-weighted surface sample.

    The cloud's bounding box is centred at the origin with unit diagonal; the
    mesh receives the same normalization.
    """
    if family not in _BUILDERS:
        raise PreconditionError(f"unknown family {family!r}")
    _check(family, params)
    boxes = _BUILDERS[family](params)
    verts, faces, fpart = [], [], []
    for k, (_, v) in enumerate(boxes):
        faces.append(_BOX_FACES + 8 * k)
        verts.append(v)
        fpart.append(np.full(len(_BOX_FACES), k))
    mesh = Mesh(np.concatenate(verts), np.concatenate(faces).astype(np.int64), np.concatenate(fpart))
    rng = np.random.default_rng(seed)
    pts, labels = _sample_surface(mesh, n_points, rng)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center, scale = (lo + hi) / 2, 1.0 / np.linalg.norm(hi - lo)
    pts = (pts - center) * scale
    mesh.vertices = (mesh.vertices - center) * scale
    return Shape(family, dict(params), mesh, PointCloud(pts), labels, [name for name, _ in boxes])


def random_shape(family: str, seed: int, n_points: int = N_POINTS) -> Shape:
    rng = np.random.default_rng([seed, FAMILIES.index(family)])
    return gen_shape(family, sample_params(family, rng), seed, n_points)


def dataset(count: int, seed: int, families=FAMILIES, n_points: int = N_POINTS) -> list[Shape]:
    """``count`` shapes cycling through ``families``, each with its own seed."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [random_shape(families[i % len(families)], int(s), n_points) for i, s in enumerate(seeds)]
