"""Command-line entry point wiring the pipeline stages together.

Subcommands cover the full loop: synth a dataset, preprocess pillar
caches, train, infer, eval, render.  One YAML config plus ``--set``
overrides feeds every stage; flags win over the file, the file wins
over defaults.  Failures exit non-zero with a single parseable line on
stderr and remove any files the failed run created.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import FIELD_DOCS, RunConfig, resolve_config, save_config
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    ParseError,
    PillarFuseError,
    TruncatedFile,
)
from .pipeline import (
    CACHE_DIR,
    eval_run,
    infer_run,
    preprocess_dataset,
    synth_run,
    train_run,
)
from .render import render_run

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

SPLITS = ("train", "val", "test")


def _config_epilog() -> str:
    width = max(len(k) for k in FIELD_DOCS)
    lines = [f"  {k.ljust(width)}  {FIELD_DOCS[k]}" for k in FIELD_DOCS]
    return ("config keys (YAML file or --set KEY=VALUE, flags win):\n"
            + "\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="YAML config file (defaults apply without one)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one config key (repeatable)")

    parser = argparse.ArgumentParser(
        prog="pillarfuse",
        description="Cooperative pillar-fusion detection pipeline.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(
            name, parents=[common], help=help_text, description=help_text,
            epilog=_config_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter)

    add("synth", "Generate a synthetic two-sensor dataset under data_root.")
    add("preprocess", "Cache pillar tensors for every frame and sensor.")
    add("train", "Train a detector; writes checkpoint, loss log and a "
                 "frozen config copy under run_dir.")

    p = add("infer", "Run a trained checkpoint over a split; writes "
                     "detection label files under run_dir.")
    p.add_argument("--split", choices=SPLITS, default="test",
                   help="dataset split to detect on (default: test)")
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="checkpoint to load (default: run_dir's)")

    p = add("eval", "Score detections against ground truth; writes "
                    "report.txt and report.csv under run_dir.")
    p.add_argument("--split", choices=SPLITS, default="test",
                   help="dataset split to score (default: test)")
    p.add_argument("--detections", metavar="DIR", default=None,
                   help="detection dir (default: run_dir/detections/SPLIT)")

    p = add("render", "Draw one frame as a birds-eye PPM image: points "
                      "gray, ground truth green, detections red.")
    p.add_argument("--split", choices=SPLITS, default="test",
                   help="dataset split to draw from (default: test)")
    p.add_argument("--frame", metavar="ID", default=None,
                   help="frame id to draw (default: first in the split)")

    return parser


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like KEY=VALUE, got {pair!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# failure cleanup
# ---------------------------------------------------------------------------

def _output_roots(command: str, cfg: RunConfig) -> list[Path]:
    if command == "synth":
        return [Path(cfg.data_root)]
    if command == "preprocess":
        return [Path(cfg.data_root) / CACHE_DIR]
    return [Path(cfg.run_dir)]


def _snapshot(root: Path) -> set[Path]:
    return set(root.rglob("*")) if root.exists() else set()


def _remove_new(root: Path, before: set[Path], existed: bool) -> None:
    """Delete files and directories created since the snapshot."""
    if not root.exists():
        return
    new = [p for p in root.rglob("*") if p not in before]
    for p in new:
        if not p.is_dir():
            p.unlink(missing_ok=True)
    for p in sorted((p for p in new if p.is_dir()),
                    key=lambda p: len(p.parts), reverse=True):
        try:
            p.rmdir()
        except OSError:
            pass
    if not existed:
        try:
            root.rmdir()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _dispatch(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.command == "synth":
        synth_run(cfg)
    elif args.command == "preprocess":
        preprocess_dataset(cfg)
    elif args.command == "train":
        run = Path(cfg.run_dir)
        run.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run / "config.yaml")
        train_run(cfg)
    elif args.command == "infer":
        infer_run(cfg, split=args.split, checkpoint=args.checkpoint)
    elif args.command == "eval":
        eval_run(cfg, split=args.split, detections_dir=args.detections)
    elif args.command == "render":
        render_run(cfg, split=args.split, fid=args.frame)


def _fail(exc: Exception, code: int) -> int:
    line = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {line}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, parse_overrides(args.overrides),
                             env=os.environ)
        roots = _output_roots(args.command, cfg)
        before = [(_snapshot(r), r.exists()) for r in roots]
        try:
            _dispatch(args, cfg)
        except Exception:
            for root, (snap, existed) in zip(roots, before):
                _remove_new(root, snap, existed)
            raise
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGED)
    except (DataError, ParseError, TruncatedFile, FileNotFoundError) as exc:
        return _fail(exc, EXIT_DATA)
    except PillarFuseError as exc:
        return _fail(exc, EXIT_DATA)
    return 0


if __name__ == "__main__":
    sys.exit(main())
