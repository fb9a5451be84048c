"""Command-line entry point: ``dfseg <subcommand> ...``.

Exit status is 0 on success. Failures print one ``dfseg: error: ...`` line
to stderr and exit with a code that identifies the kind of failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .preprocess import PreprocessError
from .trainer import NonFiniteGradientError
from .volume import VolumeFormatError

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code for unknown flags and bad values
EXIT_MISSING = 3
EXIT_VOLUME = 4
EXIT_CHECKPOINT = 5
EXIT_CONTRACT = 6
EXIT_NUMERIC = 7


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfseg", description="Head-and-neck tumor segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[16, 48, 48], metavar=("Z", "Y", "X"))
    p.add_argument("--task", choices=["task1", "task2"], default="task1")
    p.add_argument("--spacing", type=float, nargs=3, default=[1.2, 0.5, 0.5], metavar=("SZ", "SY", "SX"))
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("preprocess", help="mask, crop, resample and normalize a dataset")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=60.0)
    p.add_argument("--spacing", type=float, nargs=3, default=[1.2, 0.5, 0.5], metavar=("SZ", "SY", "SX"))
    p.add_argument("--match-ref", type=Path, default=None, help="reference volume for histogram matching")

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--task", type=int, choices=[1, 2], required=True)
    p.add_argument("--arch", choices=["basic", "dualflow"], required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--mixup", action="store_true")
    p.add_argument("--pretrained", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True, help="preprocessed dataset directory")
    p.add_argument("--out", type=Path, required=True, help="directory for checkpoints and the training log")

    p = sub.add_parser("infer", help="predict label maps with a checkpoint ensemble")
    p.add_argument("--ckpts", type=Path, nargs="+", required=True)
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tta", action="store_true")

    p = sub.add_parser("evaluate", help="aggregated Dice of predictions against references")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    return parser


def _require(path: Path | None, what: str, is_dir: bool = False) -> None:
    if path is None:
        return
    ok = path.is_dir() if is_dir else path.is_file()
    if not ok:
        raise FileNotFoundError(f"{what} not found: {path}")


def run(args: argparse.Namespace) -> str:
    """Execute one parsed command and return a one-line summary."""
    if args.command == "phantom-gen":
        if args.cases < 1:
            raise UsageError("--cases must be at least 1")
        if min(args.dims) < 16:
            raise UsageError(f"--dims must be >= 16 per axis, got {args.dims}")
        recs = pipeline.phantom_gen(args.out, args.seed, args.cases, args.dims, args.task, args.spacing)
        return f"wrote {len(recs)} {args.task} cases to {args.out}"
    if args.command == "preprocess":
        _require(args.in_dir, "input dataset", is_dir=True)
        _require(args.match_ref, "histogram reference")
        recs = pipeline.preprocess_dataset(args.in_dir, args.out, args.threshold, args.spacing, args.match_ref)
        return f"preprocessed {len(recs)} cases into {args.out}"
    if args.command == "train":
        _require(args.config, "config file")
        _require(args.data, "dataset", is_dir=True)
        _require(args.pretrained, "pretrained checkpoint")
        tr = pipeline.train(args.data, args.out, args.task, args.arch, args.fold, args.config, args.mixup, args.pretrained)
        return f"fold {args.fold}: best validation DSC {tr.best_metric:.4f} at epoch {tr.best_epoch}"
    if args.command == "infer":
        for c in args.ckpts:
            _require(c, "checkpoint")
        _require(args.in_dir, "input dataset", is_dir=True)
        ids = pipeline.infer(args.ckpts, args.in_dir, args.out, args.tta)
        return f"wrote {len(ids)} label maps to {args.out}"
    if args.command == "evaluate":
        report = pipeline.evaluate(args.pred, args.ref, args.report)
        return f"aggregated DSC mean {report.mean:.4f} over {len(report.per_case)} cases"
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    failures = (
        (UsageError, EXIT_USAGE),
        (FileNotFoundError, EXIT_MISSING),
        (VolumeFormatError, EXIT_VOLUME),
        (CheckpointError, EXIT_CHECKPOINT),
        (NonFiniteGradientError, EXIT_NUMERIC),
        (PreprocessError, EXIT_CONTRACT),
        (ValueError, EXIT_CONTRACT),
    )
    try:
        summary = run(args)
    except tuple(exc for exc, _ in failures) as err:
        code = next(c for exc, c in failures if isinstance(err, exc))
        print(f"dfseg: error: {err}", file=sys.stderr)
        return code
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
