"""Command-line entry points: run, eval, fixtures.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import PipelineConfig
from .errors import ConfigError
from .fixtures import FixtureSpec, generate_dataset
from .pipeline import evaluate_directories, run_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nucseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process an image or a directory of images")
    run.add_argument("--input", required=True, help="image file or directory")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--gt", default=None, help="directory of ground-truth label maps")
    run.add_argument("--config", default=None, help="YAML config file")
    run.add_argument("--seed", type=int, default=None, help="override run.seed")
    run.add_argument("--workers", type=int, default=None, help="override run.workers")
    run.add_argument("--debug-activations", action="store_true", help="dump activation tensors")
    run.add_argument("--require-gt", action="store_true", help="fail when any image lacks gt")
    run.add_argument(
        "--pre-resize", nargs=2, type=int, metavar=("H", "W"), default=None,
        help="Lanczos-3 resize applied before processing",
    )
    run.add_argument("--allow-unconverged", action="store_true")

    ev = sub.add_parser("eval", help="score predicted label maps against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", required=True, help="summary report JSON path")

    fx = sub.add_parser("fixtures", help="render synthetic images with ground truth")
    fx.add_argument("--spec", default=None, help="YAML fixture spec (defaults apply otherwise)")
    fx.add_argument("--out", required=True)
    fx.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.workers is not None:
        cfg.run.workers = args.workers
    if args.debug_activations:
        cfg.run.debug_activations = True
    if args.pre_resize is not None:
        cfg.run.pre_resize = list(args.pre_resize)
    if args.allow_unconverged:
        cfg.run.allow_unconverged = True
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            cfg = _load_config(args)
            summary = run_dataset(
                args.input, args.out, cfg, gt_dir=args.gt, require_gt=args.require_gt
            )
            if "evaluation" in summary:
                means = summary["evaluation"]["mean"]
                print(" ".join(f"{k}={v:.4f}" for k, v in sorted(means.items())))
        elif args.command == "eval":
            summary = evaluate_directories(args.pred, args.gt)
            Path(args.out).write_text(json.dumps(summary, indent=1))
            print(" ".join(f"{k}={v:.4f}" for k, v in sorted(summary["mean"].items())))
        elif args.command == "fixtures":
            if args.spec:
                try:
                    data = yaml.safe_load(Path(args.spec).read_text()) or {}
                except yaml.YAMLError as exc:
                    raise ConfigError(f"cannot parse fixture spec: {exc}") from exc
                spec = FixtureSpec.from_dict(data)
            else:
                spec = FixtureSpec()
            stems = generate_dataset(spec, args.out, args.seed)
            print(f"rendered {len(stems)} fixtures under {args.out}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logging.getLogger(__name__).exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
