"""Desk-scale ablation (baseline / +tap / +cbl+tap / full) and supervision ratio on synthetic data.

    python scripts/run_ablation.py --seed 0 --out runs/ablation [--no-ratio] [--preset desk]
"""
import argparse
import json
import logging
import time
from pathlib import Path

from sitsclue.config import load_config, parse_ablation_flags, write_config
from sitsclue.experiments import run_ablation, run_ratio, synth_arrays


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--config")
    ap.add_argument("--ablation-flags", default="")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--no-ratio", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.preset, parse_ablation_flags(args.ablation_flags), args.seed)
    out = Path(args.out)
    write_config(cfg, out)
    train = synth_arrays(cfg.synth, cfg.data.n_train, "train")
    test = synth_arrays(cfg.synth, cfg.data.n_test, "test")

    t0 = time.perf_counter()
    ab = run_ablation(cfg, train, progress=50)
    table = ab.table()
    print(table, end="")
    print(f"ablation took {time.perf_counter() - t0:.0f}s")
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps([r.to_dict() for r in ab.rows], indent=1) + "\n")
    if args.no_ratio:
        return
    t0 = time.perf_counter()
    ratio = run_ratio(cfg, train, test, ab.masks["full"], ab.masks["baseline"])
    print(json.dumps(ratio.to_dict(), indent=1))
    print(f"ratio took {time.perf_counter() - t0:.0f}s")
    (out / "ratio.json").write_text(json.dumps(ratio.to_dict(), indent=1) + "\n")


if __name__ == "__main__":
    main()
