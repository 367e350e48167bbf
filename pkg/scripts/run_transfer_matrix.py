#!/usr/bin/env python3
"""Jumpstart matrix: train on one preset, evaluate zero-shot on the others.

Usage:
    python3 scripts/run_transfer_matrix.py --source 3m --steps 60000 \
        --targets 5m 7m 5m_vs_6m 8m_vs_9m --out runs/transfer_matrix
"""

import argparse
from pathlib import Path

from laqt.config import default_run_config
from laqt.env import scenario_preset
from laqt.trainer import evaluate, load_learner_from_checkpoint, random_policy_win_rate, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--source", default="3m")
    parser.add_argument("--targets", nargs="+", default=["5m", "7m", "5m_vs_6m", "8m_vs_9m"])
    parser.add_argument("--steps", type=int, default=60_000)
    parser.add_argument("--stop-at", type=float, default=0.9)
    parser.add_argument("--episodes", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/transfer_matrix")
    args = parser.parse_args()

    out = Path(args.out)
    cfg = default_run_config(args.source, "la-hybrid", "pit")
    cfg.train.total_env_steps = args.steps
    cfg.train.seed = args.seed
    cfg.train.stop_at_win_rate = args.stop_at
    result = train(cfg, out / f"source_{args.source}")
    print(f"source {args.source}: win rate {result.final_win_rate:.3f}")

    for target in args.targets:
        target_cfg = default_run_config(target, "la-hybrid", "pit")
        learner, _ = load_learner_from_checkpoint(
            result.checkpoint_path, target_cfg, scenario_preset(target)
        )
        win, ret = evaluate(learner.agent, scenario_preset(target), args.episodes, args.seed + 1000)
        baseline = random_policy_win_rate(scenario_preset(target), args.episodes, args.seed + 2000)
        print(
            f"{args.source} -> {target}: jumpstart {win:.3f} (return {ret:.2f}), "
            f"random baseline {baseline:.3f}"
        )


if __name__ == "__main__":
    main()
