#!/usr/bin/env python3
"""Train every mixer on the 3m preset across seeds and plot the curves.

Usage:
    python3 scripts/run_baselines.py --steps 100000 --seeds 0 1 2 --out runs/baselines
"""

import argparse
from pathlib import Path

from laqt.analysis import write_metric_svg
from laqt.config import default_run_config
from laqt.trainer import train

COMBOS = [
    ("vdn", "pit"),
    ("qmix", "gru"),
    ("la-hybrid", "pit"),
    ("la-hard", "pit"),
    ("stacked", "pit"),
]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--preset", default="3m")
    parser.add_argument("--steps", type=int, default=100_000)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--out", default="runs/baselines")
    args = parser.parse_args()

    out = Path(args.out)
    for mixer, agent in COMBOS:
        metrics = []
        for seed in args.seeds:
            cfg = default_run_config(args.preset, mixer, agent)
            cfg.train.total_env_steps = args.steps
            cfg.train.seed = seed
            run_dir = out / f"{mixer}_{agent}_seed{seed}"
            print(f"== {mixer}+{agent} seed {seed} ==")
            result = train(cfg, run_dir)
            print(f"   final win rate {result.final_win_rate:.3f}")
            metrics.append(result.metrics_path)
        write_metric_svg(metrics, out / f"{mixer}_{agent}_win_rate.svg")


if __name__ == "__main__":
    main()
