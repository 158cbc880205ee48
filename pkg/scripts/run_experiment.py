"""Run the full pipeline for a config and print the OPS vs RPS comparison.

    python scripts/run_experiment.py configs/trend.json --out runs/trend --jobs 2
"""

import argparse
from collections import defaultdict

import numpy as np

from tcbackdoor.pipeline import BASELINE, Pipeline, RunConfig, format_summary


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config)
    results, baseline, summary = Pipeline(cfg, args.out, jobs=args.jobs).run()
    print(format_summary(summary))

    asr = defaultdict(list)
    for r in results:
        asr[r.strategy, r.alpha, r.delta_ts].append(r.asr)
    clean_acc = np.mean([r.acc_benign for r in baseline if r.strategy == BASELINE])
    print(f"\nclean victim ACC {clean_acc:.3f}")
    for alpha in cfg.attack.alphas:
        row = [f"alpha={alpha:g}"]
        for s in cfg.attack.strategies:
            row.append(f"{s} " + " ".join(f"{np.mean(asr[s, alpha, d]):.2f}" for d in cfg.trigger.delta_test_list))
        print("   ".join(row))


if __name__ == "__main__":
    main()
