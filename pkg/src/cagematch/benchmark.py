"""Seeded synthetic benchmark: train, canonicalization consistency, retrieval ablation."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import geom, shapes, train
from . import tensor as T
from .train import Pipeline, TrainConfig


@dataclass
class BenchmarkConfig:
    train_shapes: int = 40
    train_seed: int = 1
    db_shapes: int = 50
    db_seed: int = 2
    targets: int = 20
    target_seed: int = 3
    rates: tuple = (0.1, 0.25, 0.5)
    k: int = 10
    random_draws: int = 5
    eval_seed: int = 0
    pose_seed: int = 11

    def __post_init__(self):
        self.rates = tuple(self.rates)
        if min(self.train_shapes, self.db_shapes, self.targets) < 1:
            raise ValueError("benchmark splits must be nonempty")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rates"] = list(d["rates"])
        return d


@dataclass
class Splits:
    train: list
    db: list
    targets: list


def make_splits(bc: BenchmarkConfig) -> Splits:
    return Splits(shapes.dataset(bc.train_shapes, bc.train_seed),
                  shapes.dataset(bc.db_shapes, bc.db_seed),
                  shapes.dataset(bc.targets, bc.target_seed))


def train_pipeline(cfg: TrainConfig, shapes_list) -> tuple[Pipeline, dict]:
    """All three stages; returns the pipeline and per-stage curves and seconds."""
    dense = [s.cloud.points for s in shapes_list]
    clouds = train.prepare_clouds(dense, cfg.n_points, cfg.seed)
    pipe = Pipeline(cfg)
    log = {}
    for k, run in ((1, train.stage1), (2, train.stage2), (3, train.stage3)):
        t0 = time.time()
        curves, _ = run(pipe, clouds, dense=dense) if k == 1 else run(pipe, clouds)
        log[f"stage{k}"] = {"seconds": time.time() - t0, "curves": curves}
    return pipe, log


def untrained_pipeline(cfg: TrainConfig, shapes_list) -> Pipeline:
    """Freshly initialized pipeline with only the full-branch scale calibrated."""
    pipe = Pipeline(cfg)
    clouds = train.prepare_clouds([s.cloud.points for s in shapes_list], cfg.n_points, cfg.seed)
    train.calibrate_full(pipe.full, clouds)
    return pipe


def view_pairs(targets, cfg: TrainConfig, seed: int):
    """Two independent surface samplings of each target mesh, each under its own random pose."""
    rng = np.random.default_rng(seed)
    out = []
    for i, s in enumerate(targets):
        a = shapes.gen_shape(s.family, s.params, 2 * i + 1, len(s.cloud)).cloud.points
        b = shapes.gen_shape(s.family, s.params, 2 * i + 2, len(s.cloud)).cloud.points
        a, b = train.prepare_clouds([a, b], cfg.n_points, seed + 2 * i)
        out.append((train.augment(a, rng, cfg)[0], train.augment(b, rng, cfg)[0]))
    return out


def pose_consistency(pipe: Pipeline, pairs) -> dict:
    """Chamfer x 100 between the full-branch canonical clouds of each view pair.

    ``resampled`` compares the two samplings; ``same_sample`` re-poses the first
    view, which isolates the pose dependence of the map.
    """
    resampled, same = [], []
    rng = np.random.default_rng(0)
    with T.no_grad():
        for a, b in pairs:
            ca = pipe.full.canon(a).S_c.data
            cb = pipe.full.canon(b).S_c.data
            moved = a @ geom.random_rotation(rng).T + rng.uniform(-0.1, 0.1, size=3)
            cm = pipe.full.canon(moved).S_c.data
            resampled.append(100.0 * geom.chamfer_value(ca, cb))
            same.append(100.0 * geom.chamfer_value(ca, cm))
    return {"resampled": float(np.mean(resampled)), "same_sample": float(np.mean(same))}


def build_db(pipe: Pipeline, sp: Splits):
    dbc = train.prepare_clouds([s.cloud for s in sp.db], pipe.cfg.n_points, pipe.cfg.seed)
    return train.build_database(pipe, dbc, [f"db_{i:04d}" for i in range(len(dbc))],
                                [s.family for s in sp.db])


def evaluate_splits(pipe: Pipeline, db, sp: Splits, bc: BenchmarkConfig, weighting: str) -> dict:
    tgc = train.prepare_clouds([s.cloud for s in sp.targets], pipe.cfg.n_points, pipe.cfg.seed)
    return train.evaluate(pipe, db, tgc, bc.rates, bc.k, bc.eval_seed, weighting, bc.random_draws,
                          families=[s.family for s in sp.targets])


def run(cfg: TrainConfig, bc: BenchmarkConfig):
    """Returns ``(report, trained pipeline, database)``."""
    sp = make_splits(bc)
    pairs = view_pairs(sp.targets, cfg, bc.pose_seed)
    base = pose_consistency(untrained_pipeline(cfg, sp.train), pairs)
    t0 = time.time()
    pipe, log = train_pipeline(cfg, sp.train)
    seconds = time.time() - t0
    db = build_db(pipe, sp)
    report = {
        "config": cfg.to_dict(),
        "benchmark": bc.to_dict(),
        "train_seconds": seconds,
        "stages": {k: {"seconds": v["seconds"], "first": v["curves"][0] if v["curves"] else {},
                       "final": v["curves"][-1] if v["curves"] else {}} for k, v in log.items()},
        "consistency": {"trained": pose_consistency(pipe, pairs), "untrained": base},
        "eval": {w: evaluate_splits(pipe, db, sp, bc, w) for w in ("target", "uniform")},
    }
    return report, pipe, db
