"""Train the tiny configuration and report the synthetic benchmark.

    python3 scripts/run_benchmark.py --config configs/tiny.json --out runs/tiny/benchmark.json
"""
import argparse
import json
import logging
import os

from cagematch import benchmark, cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/tiny.json")
    ap.add_argument("--out", default="runs/tiny/benchmark.json")
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = cli.load_config(args.config).train
    report, _, _ = benchmark.run(cfg, benchmark.BenchmarkConfig())
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    c = report["consistency"]
    print(f"train {report['train_seconds']:.0f}s")
    print(f"canonical CDx100 trained {c['trained']['resampled']:.4f} untrained {c['untrained']['resampled']:.4f}")
    for w, rep in report["eval"].items():
        for rate, s in rep["summary"].items():
            print(f"{w:>7s} rate {rate}: mean {s['mean_cd']:.4f} no-deform {s['mean_cd_nodeform']:.4f} "
                  f"random {s['mean_cd_random']:.4f}")


if __name__ == "__main__":
    main()
