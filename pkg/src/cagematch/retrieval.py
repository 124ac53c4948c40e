"""Region tokens, weighted-L1 token distance, the shape database and its loss."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import formats
from . import tensor as T
from .nn import MLP
from .parts import MIN_MASS
from .tensor import Tensor

DB_VERSION = 1


class IncompatibleError(RuntimeError):
    """Tokens produced by different networks cannot be compared."""


class FeatureHead(MLP):
    def __init__(self, in_dim: int, rng: np.random.Generator, c_tok: int = 64):
        super().__init__([in_dim, 128, 128, 64, c_tok], rng, in_scale=np.sqrt(in_dim))
        self.c_tok = c_tok


@dataclass
class RetrievalToken:
    Q: np.ndarray
    omega: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.omega), dtype=bool)

    @property
    def shape(self):
        return self.Q.shape


def region_tokens(F, seg, theta_f: FeatureHead):
    """Differentiable token: ``Q = seg^T theta_f(F) / mass`` and ``omega = mass / N``.

    Returns ``(Q Tensor, omega ndarray, degenerate ndarray)``. Parts below the
    mass guard get zero rows.
    """
    seg = T.as_tensor(seg)
    feats = theta_f(F)
    mass = seg.data.sum(axis=0)
    degenerate = mass < MIN_MASS
    F_cls = T.matmul(T.transpose(seg), feats)
    keep = (~degenerate).astype(np.float64)[:, None]
    mass_t = T.reshape(T.reduce_sum(seg, axis=0), (-1, 1)) + (1.0 - keep)
    Q = F_cls / mass_t * keep
    omega = mass / seg.shape[0]
    return Q, omega, degenerate


def tokens(F, seg, theta_f: FeatureHead) -> RetrievalToken:
    with T.no_grad():
        Q, omega, deg = region_tokens(F, seg, theta_f)
    return RetrievalToken(Q.data.copy(), omega, deg)


WEIGHTINGS = ("target", "source", "symmetric", "uniform")


def token_distance(a: RetrievalToken, b: RetrievalToken, weighting: str = "target") -> float:
    """``sum_m w[m] * sum_c |a.Q[m,c] - b.Q[m,c]|`` with target-side weights by default."""
    if a.Q.shape != b.Q.shape:
        raise T.DimensionError(f"token shapes differ: {a.Q.shape} vs {b.Q.shape}")
    if weighting == "target":
        w = a.omega
    elif weighting == "source":
        w = b.omega
    elif weighting == "symmetric":
        w = 0.5 * (a.omega + b.omega)
    elif weighting == "uniform":
        w = np.full(len(a.omega), 1.0 / len(a.omega))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return float(w @ np.abs(a.Q - b.Q).sum(axis=1))


def loss_retrieval(Q_tgt, Q_src, D, degenerate: Optional[np.ndarray] = None) -> Tensor:
    """Regress each part's mean absolute token difference onto its distance ``D_i``.

    Degenerate parts are left out of the average.
    """
    Q_tgt, Q_src = T.as_tensor(Q_tgt), T.as_tensor(Q_src)
    D = np.asarray(D, dtype=np.float64)
    M = Q_tgt.shape[0]
    valid = np.ones(M, dtype=bool) if degenerate is None else ~np.asarray(degenerate)
    if not valid.any():
        return T.Tensor(0.0)
    reduced = T.reduce_mean(T.absolute(Q_tgt - Q_src), axis=1)
    err = T.square(reduced - D) * valid.astype(np.float64)
    return T.reduce_sum(err) / float(valid.sum())


# -- database -------------------------------------------------------------------
@dataclass
class ShapeRecord:
    id: str
    token: RetrievalToken
    centers: np.ndarray
    canonical_cloud: np.ndarray
    code: np.ndarray
    cage_vertices: np.ndarray
    cage_faces: np.ndarray
    mvc: np.ndarray
    family: str = ""


@dataclass
class ShapeDatabase:
    records: list
    M: int
    C_tok: int
    fingerprint: str

    def __post_init__(self):
        for r in self.records:
            if r.token.Q.shape != (self.M, self.C_tok):
                raise IncompatibleError(f"record {r.id}: token shape {r.token.Q.shape}")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, rid: str) -> ShapeRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def save(self, path) -> None:
        os.makedirs(path, exist_ok=True)
        manifest = {"version": DB_VERSION, "M": self.M, "C_tok": self.C_tok,
                    "fingerprint": self.fingerprint, "records": [r.id for r in self.records]}
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        for r in self.records:
            d = os.path.join(path, r.id)
            os.makedirs(d, exist_ok=True)
            formats.write_token(os.path.join(d, "token.smtk"), r.token.Q, r.token.omega)
            with open(os.path.join(d, "centers.json"), "w") as fh:
                json.dump({"centers": r.centers.tolist(), "code": r.code.tolist(),
                           "degenerate": r.token.degenerate.astype(int).tolist(),
                           "family": r.family}, fh, sort_keys=True)
            formats.write_cloud(os.path.join(d, "canonical.smpc"), r.canonical_cloud)
            formats.write_cage(os.path.join(d, "cage.smcg"), r.cage_vertices, r.cage_faces)
            formats.write_mvc(os.path.join(d, "binding.smmv"), r.mvc)

    @classmethod
    def load(cls, path) -> "ShapeDatabase":
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("version") != DB_VERSION:
            raise IncompatibleError(f"{path}: unsupported database version {manifest.get('version')}")
        records = []
        for rid in manifest["records"]:
            d = os.path.join(path, rid)
            Q, omega = formats.read_token(os.path.join(d, "token.smtk"))
            with open(os.path.join(d, "centers.json")) as fh:
                meta = json.load(fh)
            cloud, _ = formats.read_cloud(os.path.join(d, "canonical.smpc"))
            cv, cf = formats.read_cage(os.path.join(d, "cage.smcg"))
            records.append(ShapeRecord(
                rid, RetrievalToken(Q, omega, np.asarray(meta["degenerate"], dtype=bool)),
                np.asarray(meta["centers"]), cloud, np.asarray(meta["code"]), cv, cf,
                formats.read_mvc(os.path.join(d, "binding.smmv")), meta.get("family", "")))
        return cls(records, manifest["M"], manifest["C_tok"], manifest["fingerprint"])


def query(db: ShapeDatabase, target: RetrievalToken, k: int = 10, fingerprint: Optional[str] = None,
          weighting: str = "target") -> list[tuple[str, float]]:
    """Exhaustive scan; ascending distance, ties by id."""
    if len(db) == 0:
        raise ValueError("database is empty")
    if fingerprint is not None and fingerprint != db.fingerprint:
        raise IncompatibleError("target network fingerprint does not match the database")
    scored = [(r.id, token_distance(target, r.token, weighting)) for r in db.records]
    scored.sort(key=lambda t: (t[1], t[0]))
    return scored[:k]
