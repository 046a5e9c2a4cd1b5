"""Command-line front end: extract / train / predict / evaluate / report.

Exit codes: 0 success, 1 validation error (bad config or inputs),
2 runtime or convergence error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import DermfuseError, ValidationError
from .pipeline import run_evaluate, run_extract, run_predict, run_train


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.split_seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _cmd_extract(args):
    for path in run_extract(_load_config(args), dump_dir=args.dump_tensors):
        print(path)


def _cmd_train(args):
    for path in run_train(_load_config(args)):
        print(path)


def _cmd_predict(args):
    for path in run_predict(_load_config(args)):
        print(path)


def _cmd_evaluate(args):
    cfg = _load_config(args)
    report_path = run_evaluate(cfg)
    print(report_path)
    print((Path(cfg.out_dir) / "report.txt").read_text(), end="")


def _cmd_report(args):
    cfg = _load_config(args)
    report_path = Path(cfg.out_dir) / "report.txt"
    if not report_path.is_file():
        raise ValidationError(f"no report at {report_path} (run 'dermfuse evaluate' first)")
    print(report_path.read_text(), end="")
    machine = Path(cfg.out_dir) / "report.json"
    if machine.is_file():
        with open(machine, encoding="utf-8") as fh:
            print(json.dumps(json.load(fh)["rows"], indent=2, sort_keys=True))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dermfuse",
        description="Skin-lesion classification from pre-trained CNN features with calibrated SVM fusion",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("extract", _cmd_extract, "embed datasets into feature caches"),
        ("train", _cmd_train, "train the per-configuration classifiers"),
        ("predict", _cmd_predict, "score the test set into prediction CSVs"),
        ("evaluate", _cmd_evaluate, "build the evaluation report from predictions"),
        ("report", _cmd_report, "print the most recent evaluation report"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the split seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "extract":
            p.add_argument("--dump-tensors", default=None, metavar="DIR",
                           help="debug: dump every preprocessed tensor into DIR")
        p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DermfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected runtime failure
        logging.getLogger(__name__).exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
