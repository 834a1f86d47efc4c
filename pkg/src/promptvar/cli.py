"""Command-line entry point: run, preset, eval and report subcommands.

``run`` executes a config file, ``preset`` runs (or emits) one of the
bundled protocol configs, ``eval`` scores a saved checkpoint on a dumped
dataset, and ``report`` renders figures plus backing CSVs for a finished
run directory.  The output directory resolves as: ``--out`` flag, then the
``PROMPTVAR_OUT`` environment variable, then the config's own ``out_dir``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoints import CheckpointError, load_checkpoint
from .datasets import load_dataset
from .encoders import init_frozen
from .experiments import (
    ConfigError,
    ExperimentConfig,
    PROTOCOLS,
    config_to_dict,
    load_config,
    preset,
    render_table,
    resolve_out_dir,
    run_experiment,
)
from .inference import SAMPLER_FAMILIES, SamplerSpec, evaluate
from .reporting import generate_report


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, action="append", default=None,
                        help="replace the config's seed list (repeatable)")
    parser.add_argument("--learner", action="append", default=None,
                        help="replace the config's learner list (repeatable)")
    parser.add_argument("--k", type=int, default=None,
                        help="replace the prediction-time sample count")
    parser.add_argument("--out", default=None, help="output directory")


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed:
        config = replace(config, seeds=tuple(args.seed))
    if args.learner:
        config = replace(config, learners=tuple(args.learner))
    if args.k is not None:
        config = replace(config, sampler=replace(config.sampler, k=args.k))
    return config


def _print_summary(payload: dict, out: Path) -> None:
    for table in payload["tables"]:
        print(render_table(table))
        print()
    print(f"results: {out / 'results.json'}")


def _cmd_run(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = resolve_out_dir(config, args.out)
    payload = run_experiment(config, out_dir=out)
    _print_summary(payload, out)
    return 0


def _cmd_preset(args: argparse.Namespace) -> int:
    config = _apply_overrides(preset(args.name), args)
    if args.emit_config:
        print(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
        return 0
    out = resolve_out_dir(config, args.out)
    payload = run_experiment(config, out_dir=out)
    _print_summary(payload, out)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    world = init_frozen(seed=args.world_seed)
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, world)
    sampler = SamplerSpec(family=args.family, k=args.k, seed=args.seed)
    accuracy = evaluate(
        world, state, dataset.class_token_ids, dataset.features, dataset.labels, sampler,
    )
    print(
        f"{state.kind} checkpoint: {100.0 * accuracy:.2f}% over "
        f"{dataset.n_examples} examples, {len(dataset.class_token_ids)} classes "
        f"({sampler.family}, K={sampler.k})"
    )
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    written = generate_report(args.results_dir, out_dir=args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptvar",
        description="Desk-scale prompt-tuning laboratory over a frozen encoder pair.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config file (JSON or YAML)")
    p_run.add_argument("config", help="path to the config file")
    _add_override_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_preset = sub.add_parser("preset", help="run or emit a bundled protocol preset")
    p_preset.add_argument("name", help=f"one of {', '.join(PROTOCOLS)}")
    p_preset.add_argument("--emit-config", action="store_true",
                          help="print the preset config as JSON instead of running it")
    _add_override_flags(p_preset)
    p_preset.set_defaults(func=_cmd_preset)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dumped dataset")
    p_eval.add_argument("checkpoint", help="path to a saved learner checkpoint")
    p_eval.add_argument("dataset", help="path to a dumped dataset file")
    p_eval.add_argument("--k", type=int, default=10, help="prediction-time sample count")
    p_eval.add_argument("--seed", type=int, default=0, help="sampler seed")
    p_eval.add_argument("--family", default="posterior_full", choices=SAMPLER_FAMILIES,
                        help="prediction-time sampler family")
    p_eval.add_argument("--world-seed", type=int, default=0,
                        help="seed of the frozen world the checkpoint was trained in")
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="render figures and CSVs for a finished run")
    p_report.add_argument("results_dir", help="directory holding results.json")
    p_report.add_argument("--out", default=None,
                          help="report output directory (default: <results-dir>/report)")
    p_report.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
