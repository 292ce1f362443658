"""Trains the ablation variants and sweeps from a config and prints median AUCs.

    python3 scripts/run_ablation.py --config configs/desk.conf --groups variants --out ablation.csv
"""

import argparse
import logging
import time
from dataclasses import replace

from rank_moe import ablation
from rank_moe.cli import load_config
from rank_moe.synthgen import generate


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk.conf")
    p.add_argument("--groups", help="comma separated subset of variants,experts,history")
    p.add_argument("--seeds", help="comma separated training seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", default="ablation.csv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.steps:
        cfg.train = replace(cfg.train, max_steps=args.steps)
    groups = args.groups.split(",") if args.groups else cfg.ablation_groups
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.ablation_seeds

    start = time.perf_counter()
    train_recs, test_recs, _ = generate(cfg.gen)
    print(f"data: {len(train_recs)} train / {len(test_recs)} test records")
    configs = ablation.variant_configs(cfg.train, groups)
    results = ablation.run_ablation(train_recs, test_recs, configs, seeds)
    ablation.write_ablation_csv(args.out, results)
    for name, _ in configs:
        vals = sorted(r.auc_avg for r in results if r.variant == name)
        print(f"{name:<26} median {ablation.median_auc(results, name):.4f}  runs {' '.join(f'{v:.4f}' for v in vals)}")
    print(f"wrote {args.out} in {(time.perf_counter() - start) / 60:.1f} min")


if __name__ == "__main__":
    main()
