"""Command-line surface.

Subcommands: train, transfer, curriculum, eval, analyze, gradcheck, plot.
Every command is deterministic given (--seed, inputs). Exit codes: 0 ok,
2 usage/config error, 3 incompatible checkpoint, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, default_run_config, parse_run_config
from .env import PRESETS, scenario_preset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCOMPATIBLE = 3
EXIT_NUMERICAL = 4


def _load_config(args) -> "RunConfig":
    from .config import RunConfig  # noqa: F401 (typing only)

    cfg = parse_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.total_env_steps = args.steps
    if getattr(args, "lr", None) is not None:
        cfg.train.lr = args.lr
        cfg.train.transfer_lr = args.lr
    return cfg


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    result = train(cfg, out_dir)
    print(f"RESULT win_rate={result.final_win_rate:.6g} steps={result.env_steps}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .trainer import transfer

    cfg = _load_config(args)
    result = transfer(args.checkpoint, cfg, Path(args.out_dir))
    print(f"JUMPSTART win_rate={result.jumpstart_win_rate:.6g}")
    print(f"RESULT win_rate={result.final_win_rate:.6g} steps={result.env_steps}")
    return EXIT_OK


def cmd_curriculum(args) -> int:
    from .trainer import CurriculumStage, curriculum

    cfg = _load_config(args)
    stages = []
    for spec in args.stages.split(";"):
        parts = [p.strip() for p in spec.split(":")]
        if len(parts) != 2:
            raise ConfigError(f"stage {spec!r} must be <preset>:<steps|eval>")
        preset, budget = parts
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} in stage list")
        if budget == "eval":
            stages.append(CurriculumStage(preset, 0, eval_only=True))
        else:
            try:
                stages.append(CurriculumStage(preset, int(budget)))
            except ValueError:
                raise ConfigError(f"stage budget {budget!r} must be an int or 'eval'") from None
    results = curriculum(
        stages, cfg, Path(args.out_dir), init_checkpoint=args.init_checkpoint
    )
    for i, (stage, result) in enumerate(zip(stages, results)):
        print(
            f"STAGE {i} scenario={stage.scenario_preset} win_rate={result.final_win_rate:.6g} "
            f"optimizer_steps={result.optimizer_steps}"
        )
    return EXIT_OK


def _architecture_config(args, scenario: str):
    # dims restore from the run config when given; otherwise the defaults
    if getattr(args, "config", None):
        cfg = parse_run_config(args.config)
    else:
        cfg = default_run_config(scenario)
    cfg.train.seed = args.seed
    return cfg


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_learner_from_checkpoint

    cfg = _architecture_config(args, args.scenario)
    learner, meta = load_learner_from_checkpoint(args.checkpoint, cfg, scenario_preset(args.scenario))
    win, ret = evaluate(learner.agent, scenario_preset(args.scenario), args.episodes, args.seed)
    print(f"EVAL win_rate={win:.6g} mean_return={ret:.6g} episodes={args.episodes}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import (
        mean_offdiagonal,
        play_analysis_episode,
        write_credit_trace,
        write_level_histogram,
        write_pairwise_weights,
    )
    from .trainer import load_learner_from_checkpoint

    cfg = _architecture_config(args, args.scenario)
    scenario = scenario_preset(args.scenario)
    learner, meta = load_learner_from_checkpoint(args.checkpoint, cfg, scenario)
    trace = play_analysis_episode(scenario, learner, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.credits:
        wrote.append(write_credit_trace(trace, out_dir / "credits.csv"))
    if args.pairwise:
        paths = write_pairwise_weights(trace, out_dir / "pairwise")
        wrote.extend(paths)
        print(f"MEAN_PAIRWISE weight={mean_offdiagonal(trace.pairwise):.6g}")
    if args.levels:
        if trace.level_choice is None:
            print("no level choices: mixer is not in hard mode", file=sys.stderr)
            return EXIT_INCOMPATIBLE
        wrote.append(write_level_histogram(trace, out_dir / "levels.csv", cfg.mixer.levels))
    print(f"ANALYZE episode_length={trace.length} won={trace.won} files={len(wrote)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gradients, registry

    blocks = registry()
    names = list(blocks) if args.module == "all" else [args.module]
    unknown = [n for n in names if n not in blocks]
    if unknown:
        print(f"unknown gradcheck module(s) {unknown}; known: {sorted(blocks)}", file=sys.stderr)
        return EXIT_CONFIG
    worst_overall = 0.0
    failed = False
    for name in names:
        params, loss_fn = blocks[name](args.seed)
        report = check_gradients(
            params, loss_fn, block=name, seed=args.seed, samples_per_tensor=args.samples
        )
        status = "ok" if report.ok else "FAIL"
        print(f"{name}: {status} worst_rel_err={report.worst_rel_err:.3e} at {report.worst_param}")
        worst_overall = max(worst_overall, report.worst_rel_err)
        failed = failed or not report.ok
    print(f"GRADCHECK worst_rel_err={worst_overall:.3e}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_plot(args) -> int:
    from .analysis import write_metric_svg

    for path in args.metrics:
        if not Path(path).exists():
            print(f"metrics file not found: {path}", file=sys.stderr)
            return EXIT_CONFIG
    out = write_metric_svg(args.metrics, args.out, column=args.column)
    print(f"PLOT wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laqt",
        description="Level-adaptive transformer mixing on a desk-scale skirmish simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("config", help="INI run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override total env steps")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out-dir", default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("transfer", help="reload a checkpoint on a new scenario and fine-tune")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="override the transfer learning rate")
    p.add_argument("--out-dir", default="runs/transfer")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("curriculum", help="chain transfers across scenario presets")
    p.add_argument("config")
    p.add_argument("--stages", required=True, help="e.g. '3m:100000;5m_vs_6m:150000;8m_vs_9m:eval'")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/curriculum")
    p.set_defaults(fn=cmd_curriculum)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("scenario", help=f"preset name, one of {sorted(PRESETS)}")
    p.add_argument("-n", "--episodes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="run config describing the architecture dims")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="play one greedy episode and dump mixer internals")
    p.add_argument("checkpoint")
    p.add_argument("scenario")
    p.add_argument("--credits", action="store_true", help="write the credit trace CSV")
    p.add_argument("--pairwise", action="store_true", help="write per-step attention matrices")
    p.add_argument("--levels", action="store_true", help="write the hard-mode level histogram")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="run config describing the architecture dims")
    p.add_argument("--out-dir", default="runs/analysis")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference oracle over registered blocks")
    p.add_argument("--module", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6, help="entries checked per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plot", help="render metrics CSVs to a standalone SVG")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--column", default="eval_win_rate")
    p.add_argument("--out", default="curves.svg")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.IncompatibleCheckpointError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except Exception as exc:
        from .trainer import NumericalError

        if isinstance(exc, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        raise


if __name__ == "__main__":
    sys.exit(main())
