"""Three-stage joint training, database construction and evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import canon, deform, geom, parts, retrieval
from . import tensor as T
from .canon import Canonicalizer
from .deform import InfluenceNet
from .geom import PointCloud, SimilarityTransform
from .nn import Adam, load_into
from .parts import CenterHead, SegHead
from .retrieval import FeatureHead, RetrievalToken, ShapeDatabase, ShapeRecord
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

N_CAGE = 26


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs_per_stage: int = 200
    batch_size: int = 8
    weights: dict = field(default_factory=lambda: {
        "can": 1.0, "seg": 1.0, "compact": 5.0, "ccan": 5.0, "ccen": 2.0, "cseg": 2.0,
        "retrieval": 1.0, "deform": 1.0, "stability": 0.0})
    lambda_I: float = 1.0
    t_range: tuple = (-0.1, 0.1)
    euler_range: tuple = (-1.0, 1.0)
    occlusion_rates: tuple = (0.1, 0.25, 0.5)
    seed: int = 0
    parts: int = 8
    c_tok: int = 64
    n_cage: int = N_CAGE
    cage_margin: float = 0.15
    n_points: int = 2500
    patches: int = 8
    grid: int = 8
    grad_clip: float = 10.0
    cseg_matched: bool = True

    def __post_init__(self):
        self.t_range = tuple(self.t_range)
        self.euler_range = tuple(self.euler_range)
        self.occlusion_rates = tuple(self.occlusion_rates)
        defaults = TrainConfig.__dataclass_fields__["weights"].default_factory()
        unknown = set(self.weights) - set(defaults)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        self.weights = {**defaults, **self.weights}
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be nonnegative")
        for name in ("t_range", "euler_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")
        if self.n_cage != N_CAGE:
            raise ValueError("only the 26-vertex lattice cage is implemented")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs_per_stage < 0:
            raise ValueError("lr, batch_size and epochs_per_stage must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("t_range", "euler_range", "occlusion_rates"):
            d[k] = list(d[k])
        return d


class Branch:
    """Canonicalizer plus the segmentation, centre and token heads of one branch."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.canon = Canonicalizer(rng, cfg.patches, cfg.grid)
        C = self.canon.encoder.out_dim
        self.theta_l = SegHead(C + 3, cfg.parts, rng)
        self.theta_c = CenterHead(C + 3, cfg.parts, rng)
        self.theta_f = FeatureHead(C, rng, cfg.c_tok)

    def groups(self, prefix: str) -> dict[str, dict[str, Tensor]]:
        return {
            "canon": self.canon.named_parameters(prefix),
            "seg": {**self.theta_l.named_parameters(f"{prefix}/seg/theta_l"),
                    **self.theta_c.named_parameters(f"{prefix}/seg/theta_c")},
            "feat": self.theta_f.named_parameters(f"{prefix}/retrieval/theta_f"),
            "buffers": self.canon.buffers(prefix),
        }


@dataclass
class BranchOut:
    res: canon.CanonResult
    seg: Tensor
    K: Tensor
    dec: Optional[Tensor] = None

    @property
    def S_c(self) -> Tensor:
        return self.res.S_c

    @property
    def F(self) -> Tensor:
        return self.res.F


def run_branch(branch: Branch, points, decode: bool = True) -> BranchOut:
    res = branch.canon(points)
    desc = parts.point_descriptor(res.F, res.S_c)
    seg = parts.segment(desc, branch.theta_l)
    K = parts.centers(desc, branch.theta_c)
    dec = canon.decode(res.F_star, branch.canon.decoder) if decode else None
    return BranchOut(res, seg, K, dec)


class Pipeline:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.full = Branch(cfg, rng)
        self.partial = Branch(cfg, rng)
        self.theta_I = InfluenceNet(self.full.canon.encoder.out_dim, cfg.n_cage, cfg.parts, rng)

    def state(self) -> dict[str, Tensor]:
        out = {}
        for prefix, br in (("full", self.full), ("partial", self.partial)):
            for group in br.groups(prefix).values():
                out.update(group)
        out.update(self.theta_I.named_parameters("deform/theta_I"))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        load_into(self.state(), arrays)

    def save(self, path) -> None:
        T.save_checkpoint(path, self.state())

    def load(self, path) -> None:
        self.load_state(T.load_checkpoint(path))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


def copy_branch(src: Branch, dst: Branch) -> None:
    sp, dp = {}, {}
    for g in src.groups("x").values():
        sp.update(g)
    for g in dst.groups("x").values():
        dp.update(g)
    for k in sp:
        dp[k].data[...] = sp[k].data


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# -- data -----------------------------------------------------------------------------
def augment(points: np.ndarray, rng: np.random.Generator, cfg: TrainConfig):
    """Random pose: per-axis uniform translation and XYZ Euler rotation, unit scale."""
    t = rng.uniform(*cfg.t_range, size=3)
    angles = rng.uniform(*cfg.euler_range, size=3)
    tf = SimilarityTransform(geom.euler_rotation(angles), t, 1.0)
    return tf.apply(points), tf


def prepare_clouds(clouds, n_points: int, seed: int) -> list[np.ndarray]:
    """Farthest-point subsample every cloud to ``n_points``."""
    out = []
    for i, pts in enumerate(clouds):
        pts = np.asarray(pts.points if isinstance(pts, PointCloud) else pts, dtype=np.float64)
        if len(pts) > n_points:
            pts = pts[geom.fps_indices(pts, n_points, seed + i)]
        out.append(pts)
    return out


def bbox_diag(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def rms_radius(points: np.ndarray) -> float:
    return float(np.sqrt(((points - points.mean(axis=0)) ** 2).sum(axis=1).mean()))


def calibrate_full(branch: Branch, clouds) -> None:
    with T.no_grad():
        diags = [bbox_diag(branch.canon(p).S_c.data) for p in clouds]
    branch.canon.calib.data *= 1.0 / float(np.mean(diags))


# -- loss bookkeeping -------------------------------------------------------------
class StepLedger:
    """Accumulates weighted loss terms over a batch and records the step totals."""

    def __init__(self, weights: dict):
        self.weights = weights
        self.steps: list[dict] = []
        self._batch: list[dict] = []

    def add(self, terms: dict[str, Tensor], batch_size: int) -> Tensor:
        total = None
        for name, t in terms.items():
            wt = self.weights[name] * t
            total = wt if total is None else total + wt
        self._batch.append({k: float(v.data) for k, v in terms.items()})
        for k, v in self._batch[-1].items():
            if not math.isfinite(v):
                raise NumericError(f"non-finite loss term {k}")
        return total / batch_size

    def close_step(self) -> dict:
        keys = self._batch[0].keys()
        mean = {k: float(np.mean([b[k] for b in self._batch])) for k in keys}
        mean["total"] = sum(self.weights[k] * mean[k] for k in keys)
        self.steps.append(mean)
        self._batch = []
        return mean


class TrainingAborted(RuntimeError):
    def __init__(self, stage, epoch, batch, detail):
        super().__init__(f"stage {stage} epoch {epoch} batch {batch}: {detail}")
        self.stage, self.epoch, self.batch = stage, epoch, batch


def _loop(stage: int, cfg: TrainConfig, n_items: int, params: dict, step_fn, on_epoch=None):
    """Shared epoch/batch loop; returns per-epoch mean term curves."""
    rng = np.random.default_rng([cfg.seed, stage])
    opt = Adam(params, lr=cfg.lr, clip=cfg.grad_clip)
    ledger = StepLedger(cfg.weights)
    curves: list[dict] = []
    for epoch in range(cfg.epochs_per_stage):
        order = rng.permutation(n_items)
        first = len(ledger.steps)
        for b, start in enumerate(range(0, n_items, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            try:
                for i in batch:
                    loss = ledger.add(step_fn(int(i), rng), len(batch))
                    loss.backward()
            except NumericError as exc:
                raise TrainingAborted(stage, epoch, b, str(exc)) from exc
            ledger.close_step()
            opt.step()
        steps = ledger.steps[first:]
        curves.append({k: float(np.mean([s[k] for s in steps])) for k in steps[0]})
        if on_epoch is not None:
            on_epoch(epoch)
        log.info("stage %d epoch %d %s", stage, epoch,
                 " ".join(f"{k}={v:.4g}" for k, v in curves[-1].items()))
    return curves, ledger


def resample(points: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """A fresh farthest-point subsample, or the cloud itself when it is small enough."""
    if len(points) <= n_points:
        return points
    return points[geom.fps_indices(points, n_points, int(rng.integers(2**31 - 1)))]


def stage1(pipe: Pipeline, clouds, cfg: Optional[TrainConfig] = None, dense=None):
    """Full branch: reconstruction + orthogonality and segmentation/centre losses.

    With a positive ``stability`` weight each step also canonicalizes a second
    view, freshly subsampled from ``dense`` (default ``clouds``) under its own
    pose, and penalizes the Chamfer distance between the two canonical clouds.
    """
    cfg = cfg or pipe.cfg
    dense = clouds if dense is None else [np.asarray(getattr(d, "points", d), dtype=np.float64) for d in dense]
    if len(dense) != len(clouds):
        raise ValueError("dense clouds must pair one-to-one with training clouds")
    br = pipe.full
    groups = br.groups("full")
    params = {**groups["canon"], **groups["seg"]}
    if cfg.epochs_per_stage == 0:
        return [], StepLedger(cfg.weights)
    calibrate_full(br, clouds)
    diags: list[float] = []

    def step(i, rng):
        pts, _ = augment(clouds[i], rng, cfg)
        out = run_branch(br, pts)
        diags.append(bbox_diag(out.S_c.data))
        terms = {
            "can": canon.loss_can(out.S_c, out.dec, out.res.enc.R),
            "seg": parts.loss_seg(out.K, out.seg, out.S_c),
            "compact": parts.loss_compact(out.seg, out.S_c),
        }
        if cfg.weights["stability"] > 0:
            pts2, _ = augment(resample(dense[i], cfg.n_points, rng), rng, cfg)
            terms["stability"] = canon.loss_stability(out.S_c, br.canon(pts2).S_c)
        return terms

    def on_epoch(_):
        br.canon.calib.data *= 1.0 / float(np.mean(diags))
        diags.clear()

    return _loop(1, cfg, len(clouds), params, step, on_epoch)


def full_targets(br: Branch, clouds) -> list[dict]:
    """Frozen full-branch outputs per cloud; pose-invariant, so computed once unposed."""
    out = []
    with T.no_grad():
        for pts in clouds:
            o = run_branch(br, pts, decode=False)
            out.append({"S_c": o.S_c.data, "K": o.K.data, "seg": o.seg.data, "F": o.F.data})
    return out


def crop_pair(points: np.ndarray, rate: float, rng: np.random.Generator):
    seed = int(rng.integers(2**31 - 1))
    cropped, mask = geom.plane_crop(PointCloud(points), rate, seed)
    return cropped, mask


def stage2(pipe: Pipeline, clouds, cfg: Optional[TrainConfig] = None, init_from_full: bool = True):
    """Partial branch against the frozen full branch with consistency losses."""
    cfg = cfg or pipe.cfg
    if cfg.epochs_per_stage == 0:
        return [], StepLedger(cfg.weights)
    if init_from_full:
        copy_branch(pipe.full, pipe.partial)
    br = pipe.partial
    groups = br.groups("partial")
    params = {**groups["canon"], **groups["seg"]}
    ref = full_targets(pipe.full, clouds)
    ratios: list[float] = []

    def step(i, rng):
        posed, _ = augment(clouds[i], rng, cfg)
        rate = float(rng.choice(cfg.occlusion_rates))
        cropped, mask = crop_pair(posed, rate, rng)
        ids = cropped.source_ids
        out = run_branch(br, cropped.points)
        target = ref[i]
        ratios.append(rms_radius(target["S_c"][ids]) / max(rms_radius(out.S_c.data), 1e-12))
        return {
            "can": canon.loss_can(out.S_c, out.dec, out.res.enc.R),
            "seg": parts.loss_seg(out.K, out.seg, out.S_c),
            "compact": parts.loss_compact(out.seg, out.S_c),
            "ccan": canon.loss_ccan(out.S_c, Tensor(target["S_c"]), mask),
            "ccen": parts.loss_ccen(out.K, Tensor(target["K"])),
            "cseg": parts.loss_cseg(Tensor(target["seg"]), out.seg, ids, cfg.cseg_matched),
        }

    def on_epoch(_):
        br.canon.calib.data *= float(np.mean(ratios))
        ratios.clear()

    return _loop(2, cfg, len(clouds), params, step, on_epoch)


# -- stage 3 -------------------------------------------------------------------------
@dataclass
class SourceEntry:
    S_c: np.ndarray
    F: np.ndarray
    seg: np.ndarray
    K: np.ndarray
    code: np.ndarray
    cage: deform.CageState


def encode_source(pipe: Pipeline, points) -> SourceEntry:
    with T.no_grad():
        o = run_branch(pipe.full, points, decode=False)
    S_c = o.S_c.data
    cage = deform.build_cage(S_c, pipe.cfg.cage_margin)
    return SourceEntry(S_c, o.F.data, o.seg.data, o.K.data, o.F.data.max(axis=0), cage)


@dataclass
class TargetEntry:
    S_c: np.ndarray
    F: np.ndarray
    seg: np.ndarray
    K: np.ndarray
    code: np.ndarray
    pose: canon.PoseIntrinsics


def encode_target(pipe: Pipeline, points) -> TargetEntry:
    with T.no_grad():
        o = run_branch(pipe.partial, points, decode=False)
    return TargetEntry(o.S_c.data, o.F.data, o.seg.data, o.K.data, o.F.data.max(axis=0), o.res.pose)


def deform_source(pipe: Pipeline, tgt_code, tgt_K, src_code, src_K, cage_vertices, mvc):
    """Returns ``(deformed cloud Tensor, influence Tensor)``."""
    I = deform.influence(Tensor(tgt_code), Tensor(src_code), pipe.theta_I)
    moved = deform.offset_cage(cage_vertices, I, Tensor(src_K), Tensor(tgt_K))
    return deform.warp(mvc, moved), I


def stage3(pipe: Pipeline, clouds, source_clouds=None, cfg: Optional[TrainConfig] = None):
    """Token heads of both branches and the influence network on random target/source pairs."""
    cfg = cfg or pipe.cfg
    source_clouds = clouds if source_clouds is None else source_clouds
    params = {**pipe.full.groups("full")["feat"], **pipe.partial.groups("partial")["feat"],
              **pipe.theta_I.named_parameters("deform/theta_I")}
    if cfg.epochs_per_stage == 0:
        return [], StepLedger(cfg.weights)
    sources = [encode_source(pipe, p) for p in source_clouds]

    def step(i, rng):
        posed, _ = augment(clouds[i], rng, cfg)
        rate = float(rng.choice(cfg.occlusion_rates))
        cropped, _ = crop_pair(posed, rate, rng)
        tgt = encode_target(pipe, cropped.points)
        src = sources[int(rng.integers(len(sources)))]
        Q_t, _, deg_t = retrieval.region_tokens(Tensor(tgt.F), Tensor(tgt.seg), pipe.partial.theta_f)
        Q_s, _, deg_s = retrieval.region_tokens(Tensor(src.F), Tensor(src.seg), pipe.full.theta_f)
        S_dfm, I = deform_source(pipe, tgt.code, tgt.K, src.code, src.K, src.cage.vertices, src.cage.mvc)
        D, deg_d = geom.nearest_mean_per_region(tgt.S_c, tgt.seg, S_dfm.data)
        return {
            "retrieval": retrieval.loss_retrieval(Q_t, Q_s, D, deg_t | deg_s | deg_d),
            "deform": deform.loss_deform(tgt.S_c, S_dfm, I, cfg.lambda_I),
        }

    return _loop(3, cfg, len(clouds), params, step)


# -- database and evaluation ------------------------------------------------------------
def make_record(pipe: Pipeline, rid: str, points, family: str = "") -> ShapeRecord:
    src = encode_source(pipe, points)
    tok = retrieval.tokens(Tensor(src.F), Tensor(src.seg), pipe.full.theta_f)
    return ShapeRecord(rid, tok, src.K, src.S_c, src.code, src.cage.vertices, src.cage.faces,
                       src.cage.mvc, family)


def build_database(pipe: Pipeline, clouds, ids, families=None, fingerprint: Optional[str] = None) -> ShapeDatabase:
    families = families or [""] * len(ids)
    recs = [make_record(pipe, rid, p, fam) for rid, p, fam in zip(ids, clouds, families)]
    return ShapeDatabase(recs, pipe.cfg.parts, pipe.cfg.c_tok, fingerprint or pipe.fingerprint())


def target_token(pipe: Pipeline, tgt: TargetEntry) -> RetrievalToken:
    return retrieval.tokens(Tensor(tgt.F), Tensor(tgt.seg), pipe.partial.theta_f)


def deformed_cd(pipe: Pipeline, tgt: TargetEntry, rec: ShapeRecord) -> tuple[float, np.ndarray]:
    """Chamfer x 100 between the target and the record deformed toward it."""
    with T.no_grad():
        S_dfm, _ = deform_source(pipe, tgt.code, tgt.K, rec.code, rec.centers, rec.cage_vertices, rec.mvc)
    return 100.0 * geom.chamfer_value(tgt.S_c, S_dfm.data), S_dfm.data


def observe(points, rate: float, pose_seed: int, cfg: TrainConfig, posed: bool = True):
    """Pose and crop a target cloud the way evaluation sees it."""
    rng = np.random.default_rng(pose_seed)
    pts = np.asarray(points, dtype=np.float64)
    if posed:
        pts, _ = augment(pts, rng, cfg)
    if rate > 0:
        pts = geom.plane_crop(PointCloud(pts), rate, int(rng.integers(2**31 - 1)))[0].points
    return pts


def evaluate(pipe: Pipeline, db: ShapeDatabase, targets, rates=(0.1, 0.25, 0.5), k: int = 10,
             seed: int = 0, weighting: str = "target", random_draws: int = 5, ids=None,
             families=None) -> dict:
    """Top-k retrieval + deformation benchmark.

    For each target and rate: min over the top-k of the deformed Chamfer x 100,
    alongside two baselines (top-k without deformation, and k random records
    with deformation averaged over ``random_draws`` draws).
    """
    if len(targets) == 0:
        raise ValueError("no evaluation targets")
    ids = ids or [f"target_{i:04d}" for i in range(len(targets))]
    families = families or [""] * len(targets)
    per_target, summary = [], {}
    for rate in rates:
        rows = []
        for ti, pts in enumerate(targets):
            obs = observe(pts, rate, int(np.random.default_rng([seed, ti]).integers(2**31 - 1)), pipe.cfg)
            tgt = encode_target(pipe, obs)
            ranked = retrieval.query(db, target_token(pipe, tgt), k, weighting=weighting)
            cds = [deformed_cd(pipe, tgt, db.by_id(rid))[0] for rid, _ in ranked]
            nodef = [100.0 * geom.chamfer_value(tgt.S_c, db.by_id(rid).canonical_cloud) for rid, _ in ranked]
            rrng = np.random.default_rng([seed, ti, 7])
            rand = []
            for _ in range(random_draws):
                pick = rrng.choice(len(db), size=min(k, len(db)), replace=False)
                rand.append(min(deformed_cd(pipe, tgt, db.records[j])[0] for j in pick))
            best = int(np.argmin(cds))
            rows.append({"id": ids[ti], "family": families[ti], "rate": rate,
                         "best_id": ranked[best][0], "cd": cds[best], "cd_nodeform": min(nodef),
                         "cd_random": float(np.mean(rand)), "ranking": [r for r, _ in ranked]})
        per_target.extend(rows)
        summary[str(rate)] = {
            "mean_cd": float(np.mean([r["cd"] for r in rows])),
            "median_cd": float(np.median([r["cd"] for r in rows])),
            "mean_cd_nodeform": float(np.mean([r["cd_nodeform"] for r in rows])),
            "mean_cd_random": float(np.mean([r["cd_random"] for r in rows])),
        }
    return {"per_target": per_target, "summary": summary, "k": k, "weighting": weighting}
