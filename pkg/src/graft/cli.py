"""Command-line entry point: gen-data, train, eval, prune, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .ablate import SUITES, run_suite
from .config import RunConfig, ResultsLedger, config_hash, load_config, write_resolved
from .data import DataError, export_directory, generate_synthetic
from .experiment import evaluate_with, load_split, resolve, train_pipeline
from .nn import ConfigError
from .prune import iterative_prune_finetune, write_pareto_csv
from .train import DivergenceError, JsonlSink, model_from_checkpoint

log = logging.getLogger("graft")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5


class UsageError(Exception):
    """Refusal to act on the given inputs (e.g. overwriting a non-empty directory)."""


def default_out() -> Path:
    return Path(os.environ.get("GRAFT_OUT_DIR", "runs"))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _out(args, name: str) -> Path:
    return Path(args.out) if args.out else default_out() / name


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args, "data")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    split = generate_synthetic(cfg.data.synthetic)
    export_directory(split, out)
    log.info("wrote %d/%d/%d samples to %s", len(split.train), len(split.query), len(split.gallery), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "train")
    split = load_split(cfg)
    resolved = resolve(cfg, split)
    write_resolved(resolved, out)
    result = train_pipeline(cfg, split=split, out_dir=out, stages=args.stage,
                            stage1_checkpoint=args.stage1_checkpoint, from_scratch=args.from_scratch,
                            resume=args.resume, sink=JsonlSink(out / "steps.jsonl"))
    _dump(result.metrics, out / "metrics.json")
    ResultsLedger(out / "results.jsonl").append(
        "train", resolved, {"stage": args.stage, "metrics": result.metrics, "checkpoints": result.checkpoints})
    print(json.dumps(result.metrics, sort_keys=True))
    return EXIT_OK


def _load_checked(args, cfg: RunConfig):
    """Model from ``--checkpoint``, with the data split and resolved config it is checked against."""
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"missing input: checkpoint {args.checkpoint} does not exist")
    split = load_split(cfg)
    resolved = resolve(cfg, split)
    model, centroids, ckpt = model_from_checkpoint(args.checkpoint)
    stored = ckpt.meta.get("config_hash")
    expected = config_hash(resolved)
    if stored != expected:
        msg = f"checkpoint config hash {stored} does not match config hash {expected}"
        if not args.force:
            raise ConfigError(msg + "; pass --force to proceed anyway")
        log.warning(msg)
    return model, centroids, split, resolved


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, "eval")
    model, _, split, resolved = _load_checked(args, cfg)
    metrics = evaluate_with(resolved, split)(model)
    _dump(metrics, out / "metrics.json")
    ResultsLedger(out / "results.jsonl").append("eval", resolved, {"checkpoint": str(args.checkpoint),
                                                                    "metrics": metrics})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    out = _out(args, "prune")
    model, centroids, split, resolved = _load_checked(args, cfg)
    ledger = ResultsLedger(out / "results.jsonl")
    rows = iterative_prune_finetune(
        model, centroids, split.train, resolved.prune, resolved.stage2, evaluate_with(resolved, split),
        resolved.loss.triplet_scheme(), sink=lambda row: ledger.append("prune", resolved, row))
    write_pareto_csv(rows, out / "pareto.csv")
    write_resolved(resolved, out)
    for row in rows:
        print(json.dumps(row, sort_keys=True, default=float))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, "ablate")
    seeds = args.seeds if args.seeds else ([args.seed] if args.seed is not None else [0, 1, 2])
    result = run_suite(args.suite, cfg, seeds, out)
    ResultsLedger(out / "results.jsonl").append(
        "ablate", cfg, {"suite": args.suite, "seeds": seeds, "summary": result.summary, **result.extra})
    for row in result.summary:
        print(json.dumps(row, sort_keys=True, default=float))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graft", description="Gradual fusion transformer for multimodal ReID")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override every component seed")
        p.add_argument("--out", help="output directory (default: $GRAFT_OUT_DIR/<command>)")
        return p

    p = common(sub.add_parser("gen-data", help="write a synthetic dataset to disk"))
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="run stage 1 and/or 2, then evaluate"))
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--stage1-checkpoint", help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--from-scratch", action="store_true", help="allow stage 2 without a stage-1 checkpoint")
    p.add_argument("--resume", help="epoch checkpoint to resume a stage from")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint on query/gallery"),
                             ("prune", cmd_prune, "iterative magnitude pruning with fine-tuning")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--force", action="store_true", help="proceed on a config hash mismatch")
        p.set_defaults(func=func)

    p = common(sub.add_parser("ablate", help="run a named ablation suite"))
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="seeds shared by all cells (default 0 1 2)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='{"level":"%(levelname)s","logger":"%(name)s","msg":"%(message)s"}')
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as err:
        hint = f" (last checkpoint: {err.last_checkpoint})" if isinstance(err, DivergenceError) else ""
        print(f"diverged: {err}{hint}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
