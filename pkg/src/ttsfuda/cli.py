"""Command line entry point.

    ttsfuda print-config [--config FILE]
    ttsfuda train-source --config FILE [--seed N] [--device DEV]
    ttsfuda adapt --config FILE --mode stage1->stage2 [--checkpoint source.ckpt] [--dump-stage1 N]
    ttsfuda evaluate --config FILE --checkpoint FILE [--mode direct|oracle|LABEL]
    ttsfuda report --config FILE REPORT.json [REPORT.json ...]

Results go to stdout as JSON.  Failures exit nonzero with a JSON error
object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import dump_config, load_config
from .exceptions import CheckpointError, ConfigError, DatasetError, ShapeError, TrainingDivergedError
from .metrics import EvalReport
from .report import write_report

EXIT_CODES = {ConfigError: 2, DatasetError: 3, CheckpointError: 4, ShapeError: 5, TrainingDivergedError: 6}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, seed=True):
    p.add_argument("--config", help="YAML config file; defaults are used for missing keys")
    p.add_argument("--device", help="torch device, e.g. cpu or cuda:0")
    if seed:
        p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttsfuda", description="Two-stage source-free domain adaptation for segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("print-config", help="dump the fully resolved config")
    _common(p)

    p = sub.add_parser("train-source", help="train the source network")
    _common(p)

    p = sub.add_parser("adapt", help="adapt a source checkpoint to the target domain")
    _common(p)
    p.add_argument("--mode", default="stage1->stage2", help="stage1, stage2, stage1->stage2 or stage2->stage1")
    p.add_argument("--checkpoint", help="source checkpoint (default: <output_dir>/source.ckpt)")
    p.add_argument("--dump-stage1", type=int, metavar="N", help="write pseudo-label panels for the first N target images")

    p = sub.add_parser("evaluate", help="score a checkpoint on the labeled target data")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default="evaluate", help="row label for report tables: direct, oracle or any name")

    p = sub.add_parser("report", help="build a comparison table and plots from report files")
    _common(p, seed=False)
    p.add_argument("reports", nargs="+", help="report JSON files written by evaluate or adapt")
    return parser


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "device", None):
        overrides["device"] = args.device
    return load_config(args.config, overrides)


def _run(args) -> dict:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    if args.command == "print-config":
        sys.stdout.write(dump_config(cfg))
        return {}
    if args.command == "train-source":
        ckpt, report = pipeline.run_train_source(cfg)
        result = {"checkpoint": str(ckpt), "config_hash": cfg.config_hash()}
        if report is not None:
            result["source_val"] = report.aggregate
        return result
    if args.command == "adapt":
        final, reports = pipeline.run_adapt(cfg, args.mode, args.checkpoint, dump_stage1=args.dump_stage1)
        return {
            "checkpoint": str(final),
            "mode": pipeline.canonical_mode(args.mode),
            "config_hash": cfg.config_hash(),
            "reports": {stage: r.aggregate for stage, r in reports.items()},
        }
    if args.command == "evaluate":
        report = pipeline.run_evaluate(cfg, args.checkpoint, mode=args.mode)
        out.mkdir(parents=True, exist_ok=True)
        stem = "report_" + "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in args.mode)
        report.to_json(out / f"{stem}.json")
        report.to_csv(out / f"{stem}.csv")
        return {"report": str(out / f"{stem}.json"), "aggregate": report.aggregate, "config_hash": cfg.config_hash()}
    if args.command == "report":
        reports = []
        for path in args.reports:
            try:
                reports.append(EvalReport.from_json(Path(path)))
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot read report {path!r}: {exc}") from exc
        paths = write_report(reports, out)
        return {k: str(v) for k, v in paths.items()}
    raise UsageError(f"unknown command {args.command!r}")


def _fail(kind: str, message: str, code: int, details=None) -> int:
    payload = {"error": kind, "message": message}
    if details:
        payload["details"] = details
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 64)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except tuple(EXIT_CODES) as exc:
        code = next(c for cls, c in EXIT_CODES.items() if isinstance(exc, cls))
        return _fail(type(exc).__name__, str(exc), code, getattr(exc, "errors", None))
    except Exception as exc:  # noqa: BLE001 - the CLI contract is a JSON error, never a traceback
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)
    if result:
        sys.stdout.write(json.dumps(result, indent=2, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
