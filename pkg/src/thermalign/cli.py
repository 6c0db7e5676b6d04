"""Command-line front door: ``thermalign <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import dump_config, load_config
from .errors import ThermalignError

STAGES = ("gen-data", "build-dataset", "pretrain", "align", "eval", "report", "habitat", "all")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--run", type=Path, help="existing run directory to operate on")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="thermalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(STAGES) + "}")

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    p.add_argument("--n-per-species", type=int)

    p = sub.add_parser("build-dataset", parents=[common], help="balance, split, write ShareGPT files")
    p.add_argument("--balance", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--split-order", choices=("augment-first", "split-first"))
    p.add_argument("--ratios", type=_ratios)

    p = sub.add_parser("pretrain", parents=[common], help="RGB pretraining of the backbones")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("align", parents=[common], help="projector-only alignment on thermal data")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-interval", type=int)

    p = sub.add_parser("eval", parents=[common], help="score the test split")
    p.add_argument("--backend", choices=("local", "remote"))
    p.add_argument("--mode", choices=("closed", "open"), action="append", help="repeatable; default from config")
    p.add_argument("--align", dest="align_tag", help="alignment run to score, e.g. steps-500")

    sub.add_parser("report", parents=[common], help="tables and loss-curve plots for a finished run")

    p = sub.add_parser("habitat", parents=[common], help="habitat-context prompts on paired RGB images")
    p.add_argument("--backend", choices=("remote", "local"), default="remote")

    sub.add_parser("all", parents=[common], help="every stage with the configured defaults")
    return parser


def _resolve(args) -> "pipeline.PipelineConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "n_per_species", None):
        cfg = replace(cfg, scenegen=replace(cfg.scenegen, n_per_species=args.n_per_species))
    if args.command == "build-dataset":
        d = cfg.dataset
        cfg = replace(
            cfg,
            dataset=replace(
                d,
                balance=d.balance if args.balance is None else args.balance,
                split_order=args.split_order or d.split_order,
                ratios=args.ratios or d.ratios,
            ),
        )
    if args.command == "pretrain" and args.steps:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=args.steps))
    return cfg


def _run_dir(args, cfg) -> Path:
    if args.run is not None:
        if not args.run.is_dir():
            raise pipeline.StageError(f"run directory {args.run} does not exist")
        return args.run
    if args.command not in ("gen-data", "all"):
        raise pipeline.StageError(f"{args.command} needs --run <dir> from an earlier stage")
    return pipeline.new_run_dir(cfg)


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        run = _run_dir(args, cfg)
        if args.run is not None and args.command != "report":
            dump_config(cfg, run / f"config.{args.command}.yaml")
        cmd = args.command
        if cmd == "all":
            print(f"run: {run}")
            for step in (pipeline.gen_data, pipeline.build_dataset, pipeline.pretrain, pipeline.align):
                print(step(cfg, run), flush=True)
            print(pipeline.run_eval(cfg, run), flush=True)
            print(pipeline.report(run))
        elif cmd == "gen-data":
            print(f"run: {run}")
            print(pipeline.gen_data(cfg, run))
        elif cmd == "build-dataset":
            print(pipeline.build_dataset(cfg, run))
        elif cmd == "pretrain":
            print(pipeline.pretrain(cfg, run))
        elif cmd == "align":
            print(pipeline.align(cfg, run, args.max_steps, args.eval_interval))
        elif cmd == "eval":
            modes = tuple(args.mode) if args.mode else None
            print(pipeline.run_eval(cfg, run, args.backend, modes, args.align_tag))
        elif cmd == "report":
            print(pipeline.report(run))
        elif cmd == "habitat":
            print(pipeline.habitat(cfg, run, args.backend))
    except (ThermalignError, OSError) as exc:
        print(f"thermalign {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
