"""Little-endian binary file formats.

SMPC1  point cloud: u32 N, N*3 f32, optional "IDS0" + u32 N + N u32 ids
SMMS1  mesh: u32 V, u32 F, V*3 f32 positions, F*3 u32 indices
SMSG1  hard part labels: u32 N, N u16
SMTK1  retrieval token: u32 M, u32 C, M*C f64 (row-major), M f64 omega
SMCG1  cage: u32 Nc, u32 F, Nc*3 f64 vertices, F*3 u32 faces
SMMV1  mean value coordinates: u32 N, u32 Nc, N*Nc f64 (row-major)

The SMCK1 checkpoint format lives in :mod:`cagematch.tensor`.
"""
from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    pass


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, chunks) -> None:
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _expect(buf: bytes, magic: bytes, path) -> None:
    if buf[:len(magic)] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}")


def _unpack(path, fmt: str, buf: bytes, offset: int):
    try:
        return struct.unpack_from(fmt, buf, offset)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None


def _arr(path, buf: bytes, dtype: str, count: int, offset: int) -> np.ndarray:
    need = offset + count * np.dtype(dtype).itemsize
    if len(buf) < need:
        raise FormatError(f"{path}: truncated payload ({len(buf)} of {need} bytes)")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def write_cloud(path, points, source_ids=None) -> None:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    chunks = [b"SMPC1", struct.pack("<I", len(pts)), pts.tobytes()]
    if source_ids is not None:
        ids = np.ascontiguousarray(source_ids, dtype="<u4")
        chunks += [b"IDS0", struct.pack("<I", len(ids)), ids.tobytes()]
    _write(path, chunks)


def read_cloud(path):
    """Returns ``(points float64 (N, 3), source_ids or None)``."""
    buf = _read(path)
    _expect(buf, b"SMPC1", path)
    (n,) = _unpack(path, "<I", buf, 5)
    off = 9
    pts = _arr(path, buf, "<f4", 3 * n, off).reshape(n, 3).astype(np.float64)
    off += 12 * n
    ids = None
    if len(buf) > off:
        if buf[off:off + 4] != b"IDS0":
            raise FormatError(f"{path}: unexpected trailing block")
        (m,) = _unpack(path, "<I", buf, off + 4)
        if m != n:
            raise FormatError(f"{path}: id block length {m} != {n}")
        ids = _arr(path, buf, "<u4", m, off + 8).astype(np.int64)
    return pts, ids


def write_mesh(path, vertices, faces) -> None:
    v = np.ascontiguousarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.ascontiguousarray(faces, dtype="<u4").reshape(-1, 3)
    _write(path, [b"SMMS1", struct.pack("<II", len(v), len(f)), v.tobytes(), f.tobytes()])


def read_mesh(path):
    buf = _read(path)
    _expect(buf, b"SMMS1", path)
    nv, nf = _unpack(path, "<II", buf, 5)
    off = 13
    v = _arr(path, buf, "<f4", 3 * nv, off).reshape(nv, 3).astype(np.float64)
    off += 12 * nv
    f = _arr(path, buf, "<u4", 3 * nf, off).reshape(nf, 3).astype(np.int64)
    return v, f


def write_labels(path, labels) -> None:
    lab = np.ascontiguousarray(labels, dtype="<u2")
    _write(path, [b"SMSG1", struct.pack("<I", len(lab)), lab.tobytes()])


def read_labels(path) -> np.ndarray:
    buf = _read(path)
    _expect(buf, b"SMSG1", path)
    (n,) = _unpack(path, "<I", buf, 5)
    return _arr(path, buf, "<u2", n, 9).astype(np.int64)


def write_token(path, Q, omega) -> None:
    Q = np.ascontiguousarray(Q, dtype="<f8")
    w = np.ascontiguousarray(omega, dtype="<f8")
    if Q.ndim != 2 or w.shape != (Q.shape[0],):
        raise FormatError("token needs Q (M, C) and omega (M,)")
    _write(path, [b"SMTK1", struct.pack("<II", *Q.shape), Q.tobytes(), w.tobytes()])


def read_token(path):
    buf = _read(path)
    _expect(buf, b"SMTK1", path)
    m, c = _unpack(path, "<II", buf, 5)
    Q = _arr(path, buf, "<f8", m * c, 13).reshape(m, c).copy()
    w = _arr(path, buf, "<f8", m, 13 + 8 * m * c).copy()
    return Q, w


def write_cage(path, vertices, faces) -> None:
    v = np.ascontiguousarray(vertices, dtype="<f8").reshape(-1, 3)
    f = np.ascontiguousarray(faces, dtype="<u4").reshape(-1, 3)
    _write(path, [b"SMCG1", struct.pack("<II", len(v), len(f)), v.tobytes(), f.tobytes()])


def read_cage(path):
    buf = _read(path)
    _expect(buf, b"SMCG1", path)
    nv, nf = _unpack(path, "<II", buf, 5)
    off = 13
    v = _arr(path, buf, "<f8", 3 * nv, off).reshape(nv, 3).copy()
    off += 24 * nv
    f = _arr(path, buf, "<u4", 3 * nf, off).reshape(nf, 3).astype(np.int64)
    return v, f


def write_mvc(path, weights) -> None:
    w = np.ascontiguousarray(weights, dtype="<f8")
    _write(path, [b"SMMV1", struct.pack("<II", *w.shape), w.tobytes()])


def read_mvc(path) -> np.ndarray:
    buf = _read(path)
    _expect(buf, b"SMMV1", path)
    n, nc = _unpack(path, "<II", buf, 5)
    return _arr(path, buf, "<f8", n * nc, 13).reshape(n, nc).copy()
