"""Command-line entry point.

Exit codes: 0 success, 2 precondition, 3 numeric failure, 4 compatibility.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import formats, geom, parts, retrieval, shapes, train, verify
from .retrieval import IncompatibleError, ShapeDatabase
from .tensor import NumericError
from .train import TrainConfig, TrainingAborted

log = logging.getLogger("cagematch")

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4


class UsageError(Exception):
    """Bad inputs detected before any compute."""


@dataclass
class Paths:
    data_dir: str = "data"
    db_dir: str = "db"
    ckpt_dir: str = "ckpt"
    out_dir: str = "out"


@dataclass
class EvalOptions:
    k: int = 10
    weighting: str = "target"
    random_draws: int = 5
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    eval: EvalOptions = field(default_factory=EvalOptions)


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise UsageError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from exc


def load_config(path) -> RunConfig:
    """Strict JSON config: TrainConfig fields at top level plus ``paths`` and ``eval`` objects."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw = dict(raw)
    p = _strict(Paths, raw.pop("paths", {}), "paths")
    e = _strict(EvalOptions, raw.pop("eval", {}), "eval")
    if e.weighting not in retrieval.WEIGHTINGS:
        raise UsageError(f"eval.weighting must be one of {retrieval.WEIGHTINGS}")
    return RunConfig(_strict(TrainConfig, raw, "config"), p, e)


def config_dict(rc: RunConfig) -> dict:
    d = rc.train.to_dict()
    d["paths"] = dataclasses.asdict(rc.paths)
    d["eval"] = dataclasses.asdict(rc.eval)
    return d


# -- io helpers -----------------------------------------------------------------------
def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def require_dir(path, what: str) -> None:
    if not os.path.isdir(path):
        raise UsageError(f"{what} {path} does not exist")


def require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"{what} {path} does not exist")


def writable_dir(path) -> None:
    parent = os.path.dirname(os.path.abspath(path)) or "."
    while not os.path.exists(parent):
        parent = os.path.dirname(parent)
    if not os.access(parent, os.W_OK):
        raise UsageError(f"{path} is not writable")


def load_shape_dir(path):
    """``(ids, clouds, families)`` from a gen-data directory, or bare ``*.smpc`` files."""
    require_dir(path, "shape directory")
    meta = os.path.join(path, "metadata.json")
    if os.path.isfile(meta):
        with open(meta) as fh:
            entries = json.load(fh)["shapes"]
        ids = [e["id"] for e in entries]
        fams = [e["family"] for e in entries]
        files = [os.path.join(path, e["cloud"]) for e in entries]
    else:
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".smpc"))
        ids = [os.path.splitext(os.path.basename(f))[0] for f in files]
        fams = [""] * len(files)
    clouds = [formats.read_cloud(f)[0] for f in files]
    return ids, clouds, fams


def ckpt_path(rc: RunConfig, stage: int) -> str:
    return os.path.join(rc.paths.ckpt_dir, f"stage{stage}.smck")


def load_pipeline(rc: RunConfig, stage: int = 3):
    path = ckpt_path(rc, stage)
    if not os.path.isfile(path):
        raise UsageError(f"stage {stage} checkpoint missing: {path}")
    pipe = train.Pipeline(rc.train)
    try:
        pipe.load(path)
    except (KeyError, ValueError) as exc:
        raise IncompatibleError(f"{path}: {exc}") from exc
    return pipe, file_digest(path)


def load_db(path, digest: str) -> ShapeDatabase:
    require_file(os.path.join(path, "manifest.json"), "database manifest")
    db = ShapeDatabase.load(path)
    if db.fingerprint != digest:
        raise IncompatibleError(f"database {path} was built by a different checkpoint")
    return db


def write_curves(path, curves, stage: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "stage", "term", "value"])
        for epoch, row in enumerate(curves):
            for term, value in row.items():
                w.writerow([epoch, stage, term, repr(value)])


def write_steps(path, ledger, stage: int) -> None:
    if not ledger.steps:
        return
    keys = list(ledger.steps[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage"] + keys)
        for i, s in enumerate(ledger.steps):
            w.writerow([i, stage] + [repr(s[k]) for k in keys])


# -- commands -------------------------------------------------------------------------
def cmd_gen_data(args, rc: RunConfig) -> int:
    fams = tuple(f.strip() for f in args.families.split(",") if f.strip())
    bad = [f for f in fams if f not in shapes.FAMILIES]
    if bad or not fams:
        raise UsageError(f"unknown families {bad}; choose from {shapes.FAMILIES}")
    if args.count < 0:
        raise UsageError("--count must be nonnegative")
    writable_dir(args.out)
    os.makedirs(args.out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    entries = []
    for i, s in enumerate(shapes.dataset(args.count, seed, fams, args.points)):
        sid = f"shape_{i:04d}"
        formats.write_cloud(os.path.join(args.out, sid + ".smpc"), s.cloud.points)
        formats.write_mesh(os.path.join(args.out, sid + ".smms"), s.mesh.vertices, s.mesh.faces)
        formats.write_labels(os.path.join(args.out, sid + ".smsg"), s.labels)
        entries.append({"id": sid, "family": s.family, "params": s.params, "parts": s.parts,
                        "face_part": s.mesh.face_part.tolist(), "cloud": sid + ".smpc",
                        "mesh": sid + ".smms", "labels": sid + ".smsg"})
    meta = {"count": args.count, "seed": seed, "families": list(fams), "points": args.points,
            "shapes": entries}
    with open(os.path.join(args.out, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    counts = {f: sum(e["family"] == f for e in entries) for f in fams}
    print(f"wrote {len(entries)} shapes to {args.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    cfg = rc.train
    meta = os.path.join(rc.paths.data_dir, "metadata.json")
    require_file(meta, "training metadata")
    first = stages[0]
    if first > 1:
        require_file(ckpt_path(rc, first - 1), f"stage {first - 1} checkpoint (needed by stage {first})")
    writable_dir(rc.paths.ckpt_dir)
    _, clouds, _ = load_shape_dir(rc.paths.data_dir)
    if not clouds:
        raise UsageError(f"no training shapes in {rc.paths.data_dir}")
    dense = [np.asarray(c, dtype=np.float64) for c in clouds]
    clouds = train.prepare_clouds(dense, cfg.n_points, cfg.seed)
    os.makedirs(rc.paths.ckpt_dir, exist_ok=True)
    pipe = train.Pipeline(cfg)
    if first > 1:
        pipe.load(ckpt_path(rc, first - 1))
    with open(os.path.join(rc.paths.ckpt_dir, "config.json"), "w") as fh:
        json.dump(config_dict(rc), fh, indent=1, sort_keys=True)
    runners = {1: train.stage1, 2: train.stage2, 3: train.stage3}
    for st in stages:
        extra = {"dense": dense} if st == 1 else {}
        curves, ledger = runners[st](pipe, clouds, **extra)
        pipe.save(ckpt_path(rc, st))
        write_curves(os.path.join(rc.paths.ckpt_dir, f"curves_stage{st}.csv"), curves, st)
        write_steps(os.path.join(rc.paths.ckpt_dir, f"steps_stage{st}.csv"), ledger, st)
        last = curves[-1] if curves else {}
        print(f"stage {st}: {len(curves)} epochs, final total {last.get('total', float('nan')):.6g}")
    return EXIT_OK


def cmd_build_db(args, rc: RunConfig) -> int:
    ids, clouds, fams = load_shape_dir(args.shapes)
    pipe, digest = load_pipeline(rc)
    man = os.path.join(args.out, "manifest.json")
    if os.path.isfile(man):
        with open(man) as fh:
            old = json.load(fh)
        if (old.get("fingerprint"), old.get("M"), old.get("C_tok")) != (digest, rc.train.parts, rc.train.c_tok):
            raise IncompatibleError(f"{args.out} holds a database from a different checkpoint or config")
    writable_dir(args.out)
    clouds = train.prepare_clouds(clouds, rc.train.n_points, rc.train.seed)
    db = train.build_database(pipe, clouds, ids, fams, digest)
    db.save(args.out)
    print(f"built database with {len(db)} records at {args.out}")
    return EXIT_OK


def _read_target(path, rc: RunConfig) -> np.ndarray:
    require_file(path, "target cloud")
    pts, _ = formats.read_cloud(path)
    return train.prepare_clouds([pts], rc.train.n_points, rc.train.seed)[0]


def _observe_args(args):
    if not 0.0 <= args.occlusion < 1.0:
        raise UsageError("--occlusion must be in [0, 1)")


def cmd_query(args, rc: RunConfig) -> int:
    _observe_args(args)
    if args.topk < 1:
        raise UsageError("--topk must be positive")
    pts = _read_target(args.target, rc)
    pipe, digest = load_pipeline(rc)
    db = load_db(args.db, digest)
    posed = args.pose_seed is not None
    obs = train.observe(pts, args.occlusion, args.pose_seed if posed else 0, rc.train, posed=posed)
    tgt = train.encode_target(pipe, obs)
    ranked = retrieval.query(db, train.target_token(pipe, tgt), args.topk, weighting=args.weighting)
    best, best_cd = None, np.inf
    print("rank\tid\tdis\tcd_x100")
    for i, (rid, dis) in enumerate(ranked):
        cd, pts_d = train.deformed_cd(pipe, tgt, db.by_id(rid))
        print(f"{i + 1}\t{rid}\t{dis:.6f}\t{cd:.4f}")
        if cd < best_cd:
            best, best_cd = pts_d, cd
    if args.out:
        formats.write_cloud(args.out, best)
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    rates = [float(r) for r in args.occlusion_rates.split(",") if r.strip()]
    if not rates or not all(0.0 <= r < 1.0 for r in rates):
        raise UsageError("--occlusion-rates must be comma-separated values in [0, 1)")
    ids, clouds, fams = load_shape_dir(args.targets)
    if not clouds:
        raise UsageError(f"no targets in {args.targets}")
    writable_dir(args.report)
    pipe, digest = load_pipeline(rc)
    db = load_db(args.db, digest)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    clouds = train.prepare_clouds(clouds, rc.train.n_points, rc.train.seed)
    e = rc.eval
    rep = train.evaluate(pipe, db, clouds, rates, args.topk or e.k, e.seed,
                         args.weighting or e.weighting, e.random_draws, ids, fams)
    with open(args.report, "w") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True)
    table = os.path.splitext(args.report)[0] + ".csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate", "family", "mean_cd_x100", "count"])
        for rate in rates:
            rows = [r for r in rep["per_target"] if r["rate"] == rate]
            for fam in sorted({r["family"] for r in rows}) + ["all"]:
                sel = [r["cd"] for r in rows if fam == "all" or r["family"] == fam]
                w.writerow([rate, fam, f"{np.mean(sel):.6f}", len(sel)])
    for rate, s in rep["summary"].items():
        print(f"rate {rate}: mean CDx100 {s['mean_cd']:.4f}  median {s['median_cd']:.4f}  "
              f"no-deform {s['mean_cd_nodeform']:.4f}  random {s['mean_cd_random']:.4f}")
    return EXIT_OK


def _branch(pipe, name: str):
    return pipe.partial if name == "partial" else pipe.full


def cmd_canonicalize(args, rc: RunConfig) -> int:
    pts = _read_target(args.input, rc)
    pipe, _ = load_pipeline(rc, args.ckpt_stage)
    res = _branch(pipe, args.branch).canon(pts)
    formats.write_cloud(args.out, res.S_c.data)
    side = {"pose": res.pose.to_json(), "branch": args.branch}
    with open(args.out + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
    print(json.dumps(side["pose"]))
    return EXIT_OK


def cmd_segment(args, rc: RunConfig) -> int:
    pts = _read_target(args.input, rc)
    pipe, _ = load_pipeline(rc, args.ckpt_stage)
    out = train.run_branch(_branch(pipe, args.branch), pts, decode=False)
    formats.write_labels(args.out, parts.hard_labels(out.seg))
    centers = {"centers": out.K.data.tolist(), "mass": parts.part_mass(out.seg).tolist()}
    with open(args.out + ".json", "w") as fh:
        json.dump(centers, fh, indent=1)
    print(json.dumps(centers["centers"]))
    return EXIT_OK


def cmd_deform(args, rc: RunConfig) -> int:
    pts = _read_target(args.target, rc)
    pipe, digest = load_pipeline(rc)
    db = load_db(args.db, digest)
    try:
        rec = db.by_id(args.source_id)
    except KeyError:
        raise UsageError(f"no record {args.source_id!r} in {args.db}") from None
    tgt = train.encode_target(pipe, pts)
    cd, out = train.deformed_cd(pipe, tgt, rec)
    formats.write_cloud(args.out, out)
    print(f"{args.source_id}\tcd_x100\t{cd:.4f}")
    return EXIT_OK


def cmd_verify(args, rc: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    print(f"master seed {seed}")
    reports = verify.run(args.suite, seed, args.trials)
    for r in reports:
        print(r.summary())
    return EXIT_OK if all(r.ok for r in reports) else 1


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="cagematch", parents=[common],
                                description="Joint canonicalization, retrieval and cage deformation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a procedural shape dataset")
    s.add_argument("--families", default=",".join(shapes.FAMILIES))
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--points", type=int, default=shapes.N_POINTS)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="run training stages")
    s.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-db", parents=[common], help="encode source shapes into a database")
    s.add_argument("--shapes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("query", parents=[common], help="retrieve and deform for one target")
    s.add_argument("--db", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--occlusion", type=float, default=0.0)
    s.add_argument("--pose-seed", type=int, default=None)
    s.add_argument("--topk", type=int, default=10)
    s.add_argument("--weighting", choices=retrieval.WEIGHTINGS, default="target")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", parents=[common], help="benchmark a database against targets")
    s.add_argument("--db", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--occlusion-rates", default="0.1,0.25,0.5")
    s.add_argument("--report", required=True)
    s.add_argument("--topk", type=int, default=None)
    s.add_argument("--weighting", choices=retrieval.WEIGHTINGS, default=None)
    s.set_defaults(func=cmd_eval)

    for name, func, help_ in (("canonicalize", cmd_canonicalize, "map a cloud into the canonical frame"),
                              ("segment", cmd_segment, "per-point part labels and centres")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--input", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--branch", choices=["full", "partial"], default="partial")
        s.add_argument("--ckpt-stage", type=int, choices=[1, 2, 3], default=3)
        s.set_defaults(func=func)

    s = sub.add_parser("deform", parents=[common], help="deform one database record onto a target")
    s.add_argument("--db", required=True)
    s.add_argument("--source-id", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deform)

    s = sub.add_parser("verify", parents=[common], help="run oracle and property suites")
    s.add_argument("suite", choices=list(verify.SUITES) + ["all"])
    s.add_argument("--trials", type=int, default=None)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config)
        if args.seed is not None:
            rc.train.seed = args.seed
        return args.func(args, rc)
    except (UsageError, geom.PreconditionError, FileNotFoundError, formats.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IncompatibleError as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
