"""Brute-force oracles and seeded property suites."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import canon, deform, geom, parts, retrieval, shapes, vn
from . import tensor as T
from .canon import Canonicalizer
from .tensor import Tensor

# tolerance table, mirrored in README
TOL = {
    "feature_invariance": 1e-5,
    "canonical_invariance": 1e-5,
    "vn_linear_equivariance": 1e-9,
    "vn_nonlinear_equivariance": 1e-9,
    "translation_equivariance": 1e-6,
    "partition_of_unity": 1e-9,
    "linear_precision": 1e-6,
    "identity_warp": 1e-6,
    "affine_warp": 1e-6,
    "vertex_interpolation": 1e-3,
    "gradient": 1e-4,
}

LOSSES = ("L_can", "L_seg", "L_retrieval", "L_deform", "L_ccan", "L_ccen", "L_cseg")


@dataclass
class PropertyReport:
    suite: str
    cases: int = 0
    failures: list = field(default_factory=list)
    max_error: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def record(self, prop: str, err: float, seed, tol: float) -> None:
        err = float(err)
        self.max_error[prop] = max(self.max_error.get(prop, 0.0), err)
        if not err <= tol:
            self.failures.append({"property": prop, "seed": seed, "error": err, "tol": tol})

    def summary(self) -> str:
        lines = [f"{self.suite}: {self.cases} cases, {len(self.failures)} failures, {self.seconds:.1f}s"]
        for k, v in sorted(self.max_error.items()):
            lines.append(f"  {k:<28s} max err {v:.3e}")
        for f in self.failures[:10]:
            lines.append(f"  FAIL {f['property']} seed={f['seed']} err={f['error']:.3e} tol={f['tol']:.0e}")
        return "\n".join(lines)


def case_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i])


# -- chamfer oracle ----------------------------------------------------------------
def oracle_chamfer(a, b) -> float:
    """O(N^2) double loop with the same per-point arithmetic as the KD-tree version."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise geom.PreconditionError("chamfer needs two nonempty clouds")

    def one_way(p, q):
        best = np.empty(len(p))
        for i in range(len(p)):
            m = np.inf
            for j in range(len(q)):
                diff = p[i] - q[j]
                d = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]
                if d < m:
                    m = d
            best[i] = m
        return best.mean()

    return one_way(a, b) + one_way(b, a)


def suite_oracle(seed: int = 0, trials: int = 200, max_n: int = 128) -> PropertyReport:
    rep = PropertyReport("oracle")
    t0 = time.time()
    for i in range(trials):
        rng = case_rng(seed, i)
        a = rng.normal(size=(int(rng.integers(1, max_n + 1)), 3))
        b = rng.normal(size=(int(rng.integers(1, max_n + 1)), 3))
        rep.record("chamfer_exact", abs(geom.chamfer_value(a, b) - oracle_chamfer(a, b)), (seed, i), 0.0)
        rep.cases += 1
    rep.seconds = time.time() - t0
    return rep


# -- equivariance ---------------------------------------------------------------------
def _trial_cloud(rng, n: int = 256) -> np.ndarray:
    fam = shapes.FAMILIES[int(rng.integers(len(shapes.FAMILIES)))]
    return shapes.random_shape(fam, int(rng.integers(2**31 - 1)), n_points=n).cloud.points


def suite_equivariance(seed: int = 0, trials: int = 50, net: Canonicalizer | None = None,
                       n_points: int = 256) -> PropertyReport:
    """Random (shape, R, T, scale) trials against an untrained or given canonicalizer."""
    rep = PropertyReport("equivariance")
    t0 = time.time()
    if net is None:
        net = Canonicalizer(np.random.default_rng([seed, 10**6]))
    for i in range(trials):
        rng = case_rng(seed, i)
        pts = _trial_cloud(rng, n_points)
        R = geom.random_rotation(rng)
        t = rng.uniform(-1, 1, size=3)
        lam = float(rng.uniform(0.5, 2.0))
        moved = lam * pts @ R.T + t
        with T.no_grad():
            a, b = net(pts), net(moved)
            x = Tensor(rng.normal(size=(16, 5, 3)))
            W = Tensor(rng.normal(size=(4, 5)))
            U = Tensor(rng.normal(size=(5, 5)))
            xr = Tensor(x.data @ R.T)
            lin = np.abs(vn.vn_linear(xr, W).data - vn.vn_linear(x, W).data @ R.T).max()
            nl = np.abs(vn.vn_nonlinear(xr, U).data - vn.vn_nonlinear(x, U).data @ R.T).max()
            shifted = net.encoder(pts + t).T_pred.data
            trans = np.abs(shifted - (a.enc.T_pred.data + t)).max()
        rep.record("feature_invariance", np.abs(a.F.data - b.F.data).max(), (seed, i), TOL["feature_invariance"])
        rep.record("canonical_invariance", np.abs(a.S_c.data - b.S_c.data).max(), (seed, i),
                   TOL["canonical_invariance"])
        rep.record("vn_linear_equivariance", lin, (seed, i), TOL["vn_linear_equivariance"])
        rep.record("vn_nonlinear_equivariance", nl, (seed, i), TOL["vn_nonlinear_equivariance"])
        rep.record("translation_equivariance", trans, (seed, i), TOL["translation_equivariance"])
        rep.cases += 1
        if rep.failures:
            break
    rep.seconds = time.time() - t0
    return rep


# -- mvc ---------------------------------------------------------------------------------
def suite_mvc(seed: int = 0, trials: int = 50, n_points: int = 200) -> PropertyReport:
    rep = PropertyReport("mvc")
    t0 = time.time()
    for i in range(trials):
        rng = case_rng(seed, i)
        pts = rng.uniform(-1, 1, size=(n_points, 3)) * rng.uniform(0.1, 2.0, size=3)
        cage = deform.build_cage(pts, float(rng.uniform(0.05, 0.5)))
        W = cage.mvc
        C = cage.vertices
        rep.record("partition_of_unity", np.abs(W.sum(axis=1) - 1).max(), (seed, i), TOL["partition_of_unity"])
        rep.record("linear_precision", np.abs(W @ C - pts).max(), (seed, i), TOL["linear_precision"])
        warped = deform.warp(W, Tensor(C)).data
        rep.record("identity_warp", np.abs(warped - pts).max(), (seed, i), TOL["identity_warp"])
        A = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
        b = rng.normal(size=3)
        moved = deform.warp(W, Tensor(C @ A.T + b)).data
        rep.record("affine_warp", np.abs(moved - (pts @ A.T + b)).max(), (seed, i), TOL["affine_warp"])
        v = int(rng.integers(len(C)))
        centre = C.mean(axis=0)
        near = C[v] + 1e-5 * (centre - C[v])
        w = deform.mvc_weights(near, cage)
        rep.record("vertex_interpolation", 1.0 - w[v], (seed, i), TOL["vertex_interpolation"])
        rep.cases += 1
    rep.seconds = time.time() - t0
    return rep


# -- gradients -------------------------------------------------------------------------
def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def gradient_cases(rng: np.random.Generator, n: int = 48, m: int = 4, c: int = 6):
    """One small instance per loss: ``name -> (objective, leaves)``."""
    cases = {}

    S, S_hat, R = _leaf(rng, n, 3), _leaf(rng, n, 3), _leaf(rng, 3, 3)
    cases["L_can"] = (lambda: canon.loss_can(S, S_hat, R), [S, S_hat, R])

    K, logits, S2 = _leaf(rng, m, 3), _leaf(rng, n, m), _leaf(rng, n, 3)
    cases["L_seg"] = (lambda: parts.loss_seg(K, T.softmax(logits), S2), [K, logits, S2])

    Qt, Qs = _leaf(rng, m, c), _leaf(rng, m, c)
    D = np.abs(rng.normal(size=m))
    cases["L_retrieval"] = (lambda: retrieval.loss_retrieval(Qt, Qs, D), [Qt, Qs])

    src = rng.uniform(-0.5, 0.5, size=(n, 3))
    cage = deform.build_cage(src, 0.2)
    I, Ks, Kt = _leaf(rng, cage.n_vertices, m, scale=0.1), _leaf(rng, m, 3), _leaf(rng, m, 3)
    tgt = Tensor(rng.uniform(-0.5, 0.5, size=(n, 3)))

    def l_deform():
        moved = deform.offset_cage(cage.vertices, I, Ks, Kt)
        return deform.loss_deform(tgt, deform.warp(cage.mvc, moved), I)
    cases["L_deform"] = (l_deform, [I, Ks, Kt])

    full = _leaf(rng, n, 3)
    keep = np.zeros(n, dtype=bool)
    keep[rng.permutation(n)[: n // 2]] = True
    part = _leaf(rng, int(keep.sum()), 3)
    mask = geom.OcclusionMask(keep)
    cases["L_ccan"] = (lambda: canon.loss_ccan(part, full, mask), [part, full])

    Kp, Kf = _leaf(rng, m, 3), _leaf(rng, m, 3)
    cases["L_ccen"] = (lambda: parts.loss_ccen(Kp, Kf), [Kp, Kf])

    lf, lp = _leaf(rng, n, m), _leaf(rng, int(keep.sum()), m)
    ids = mask.indices
    cases["L_cseg"] = (lambda: parts.loss_cseg(T.softmax(lf), T.softmax(lp), ids), [lf, lp])
    return cases


def suite_gradients(seed: int = 0) -> PropertyReport:
    rep = PropertyReport("gradients")
    t0 = time.time()
    cases = gradient_cases(case_rng(seed, 0))
    if tuple(cases) != LOSSES:
        raise AssertionError(f"gradient suite covers {tuple(cases)}")
    for name, (f, leaves) in cases.items():
        rep.record(name, T.check_gradients(f, leaves), (seed, 0), TOL["gradient"])
        rep.cases += 1
    rep.seconds = time.time() - t0
    return rep


SUITES = {
    "equivariance": suite_equivariance,
    "mvc": suite_mvc,
    "gradients": suite_gradients,
    "oracle": suite_oracle,
}


def run(name: str, seed: int = 0, trials: int | None = None) -> list[PropertyReport]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for n in names:
        kwargs = {} if trials is None or n == "gradients" else {"trials": trials}
        out.append(SUITES[n](seed, **kwargs))
    return out
