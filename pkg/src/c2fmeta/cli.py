"""Command-line entry point.

    c2fmeta gen-data     --out RUN [--config cfg.json] [--seed S]
    c2fmeta train-bde    --out RUN
    c2fmeta pseudo-label --out RUN
    c2fmeta meta-train   --out RUN
    c2fmeta evaluate     --out RUN
    c2fmeta run-all      --out RUN
    c2fmeta compare      --out DIR [--seeds 0 1 2 3 4] [--variants ...]

Stage subcommands read earlier stage outputs from the run directory. Exit
codes: 0 success, 2 config error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .pipeline import (
    VARIANTS,
    ExperimentConfig,
    StageError,
    _run_stage,
    compare,
    render_tables,
    run_pipeline,
    stage_bde,
    stage_data,
    stage_eval,
    stage_meta,
    stage_pseudo,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--embedding", choices=["bde", "pixels"])
    common.add_argument("--no-visual", action="store_true", help="drop the instance discrimination term")
    common.add_argument("--no-semantic", action="store_true", help="drop the coarse classification term")
    common.add_argument("--n-s", type=int, dest="n_s", help="pseudo-class size (default: from validation split)")
    common.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    common.add_argument("--data-path", dest="data_path", help="CSV dataset to split instead of generating one")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="c2fmeta", description="Coarse-to-fine pseudo-labelled few-shot learning")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-data", "generate and split the dataset"),
        ("train-bde", "train the embedding on coarse labels"),
        ("pseudo-label", "group coarse classes into pseudo-fine classes"),
        ("meta-train", "episodic ProtoNet training on pseudo-classes"),
        ("evaluate", "few-shot evaluation on the test split"),
        ("run-all", "all stages in order"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    cmp_ = sub.add_parser("compare", parents=[common], help="baseline and ablation matrix")
    cmp_.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    cmp_.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    return p


def load_config(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    if args.embedding:
        base["embedding"] = args.embedding
    if args.no_visual:
        base["visual_on"] = False
    if args.no_semantic:
        base["semantic_on"] = False
    for key in ("n_s", "eval_episodes", "data_path"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    return ExperimentConfig.from_dict(base)


def _stage_command(cmd: str, cfg: ExperimentConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    if cmd == "gen-data":
        _run_stage("data", stage_data, cfg, run_dir)
        return
    train, val, test = _run_stage("data", stage_data, cfg, run_dir)
    params = None
    if cmd == "train-bde" or cfg.embedding == "bde":
        params = _run_stage("bde", stage_bde, cfg, run_dir, train)
    if cmd == "train-bde":
        return
    pd = _run_stage("pseudo", stage_pseudo, cfg, run_dir, train, val, params)
    if cmd == "pseudo-label":
        print(json.loads((run_dir / "c2f_report.json").read_text()))
        return
    enc = _run_stage("meta", stage_meta, cfg, run_dir, pd)
    if cmd == "meta-train":
        return
    for k, rep in _run_stage("eval", stage_eval, cfg, run_dir, enc, test).items():
        print(f"{cfg.eval_way}-way {k}-shot: {rep}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "compare":
            res = compare(cfg, args.out, seeds=args.seeds, variants=args.variants)
            print(render_tables(res, cfg.eval_shots, cfg.eval_way))
        elif args.command == "run-all":
            for k, rep in run_pipeline(cfg, args.out).items():
                print(f"{cfg.eval_way}-way {k}-shot: {rep}")
        else:
            _stage_command(args.command, cfg, args.out)
    except StageError as exc:
        if isinstance(exc.cause, ConfigError):
            print(f"config error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
