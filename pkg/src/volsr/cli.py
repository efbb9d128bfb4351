"""Command-line entry point.

Verbs: generate, train, corrupt, reconstruct, evaluate, run. Every verb
takes --config (JSON experiment file); --seed and --output override the
config values. Exit code 0 on success, 2 on a structured pipeline error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .harness import ExperimentConfig, HarnessError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volsr", description="Volumetric super-resolution experiment harness")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--output", default=None, help="override the config output directory")

    p = sub.add_parser("generate", help="write the phantom dataset and manifest")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing non-empty dataset dir")

    p = sub.add_parser("train", help="train one model stage")
    common(p)
    p.add_argument("--stage", required=True, choices=["ae", "ldm"])

    p = sub.add_parser("corrupt", help="apply configured corruptions to the held-out set")
    common(p)

    p = sub.add_parser("reconstruct", help="reconstruct held-out cases with one method")
    common(p)
    p.add_argument("--method", required=True, choices=list(harness.METHODS))
    p.add_argument("--case", type=int, default=None, help="single case index (default: all)")
    p.add_argument("--corruption", default=None, help="single corruption name (default: all)")

    p = sub.add_parser("evaluate", help="emit metric tables and slice renderings")
    common(p)

    p = sub.add_parser("run", help="full pipeline: generate, train, corrupt, reconstruct, evaluate")
    common(p)
    p.add_argument("--force", action="store_true")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.output is not None:
        cfg = replace(cfg, output_dir=args.output)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.verb == "generate":
            out = harness.cmd_generate(cfg, force=args.force)
        elif args.verb == "train":
            out = harness.cmd_train(cfg, args.stage)
        elif args.verb == "corrupt":
            out = harness.cmd_corrupt(cfg)
        elif args.verb == "reconstruct":
            paths = harness.cmd_reconstruct(cfg, args.method, case=args.case, corruption=args.corruption)
            out = f"{len(paths)} reconstruction(s)"
        elif args.verb == "evaluate":
            out = harness.cmd_evaluate(cfg)
        else:
            out = harness.run_pipeline(cfg, force=args.force)
    except (HarnessError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"ok: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
