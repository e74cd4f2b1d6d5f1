"""Command-line entry point: ``physrep {generate,pretrain,probe,report,selftest,run}``.

Errors are printed as one line, ``E_<CODE>: message``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .probe import read_results
from .report import write_report
from .selftest import run_selftest
from .simulate import DatasetError
from .ssl import METHODS, TrainingError

log = logging.getLogger("physrep")

EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_DATA": 4, "E_MISSING": 5, "E_TRAIN": 6, "E_SELFTEST": 7, "E_INTERNAL": 70}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="rerun stages even when the ledger has them")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes for grid cells")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. probe.epochs=20 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="physrep", description="Self-supervised physical representation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="simulate datasets for every configured system")
    p = sub.add_parser("pretrain", parents=[common], help="pretrain encoders")
    p.add_argument("--method", action="append", help=f"one of {METHODS} (repeatable; default: all configured)")
    p.add_argument("--system", action="append", help="restrict to a system (repeatable)")
    p = sub.add_parser("probe", parents=[common], help="fit attentive probes and write the results CSV")
    p.add_argument("--method", action="append")
    p.add_argument("--system", action="append")
    sub.add_parser("report", parents=[common], help="rebuild summary tables from the results CSV")
    sub.add_parser("run", parents=[common], help="generate, pretrain, probe and report")
    p = sub.add_parser("selftest", parents=[common], help="gradient, loss and simulator checks")
    p.add_argument("--only", action="append", help="restrict to a check name or kind (repeatable)")
    return parser


def resolve_config(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    return load_config(args.config, overrides)


def _check_methods(methods):
    for m in methods or []:
        if m not in METHODS:
            raise CliError("E_USAGE", f"unknown method '{m}'; expected one of {list(METHODS)}")


def _dispatch(args) -> int:
    if args.command == "selftest":
        results = run_selftest(args.only)
        for r in results:
            print(r.line())
        failed = [f"{r.kind}:{r.name}" for r in results if not r.passed]
        if not results:
            raise CliError("E_USAGE", f"no checks match {args.only}")
        if failed:
            raise CliError("E_SELFTEST", f"{len(failed)} check(s) failed: {', '.join(failed)}")
        print(f"all {len(results)} checks passed")
        return 0

    cfg = resolve_config(args)
    if args.command == "generate":
        for system, status in pipeline.run_generate(cfg, args.force, args.jobs).items():
            print(f"{system}: {status}")
    elif args.command == "pretrain":
        _check_methods(args.method)
        status = pipeline.run_pretrain(cfg, args.method, args.system, args.force, args.jobs)
        for cell, st in status.items():
            print(f"{cell}: {st}")
    elif args.command == "probe":
        _check_methods(args.method)
        print(pipeline.run_probe(cfg, args.method, args.system, args.force, args.jobs))
    elif args.command == "report":
        path = pipeline.results_path(cfg)
        if not path.exists():
            raise CliError("E_MISSING", f"probe stage missing: {path} not found")
        print(write_report(cfg, path))
    elif args.command == "run":
        path = pipeline.run_all(cfg, args.force, args.jobs)
        print(path)
        print(f"{len(read_results(path))} result rows")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return _dispatch(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "E_CONFIG", str(exc)
    except pipeline.StageError as exc:
        code, msg = exc.code, str(exc)
    except DatasetError as exc:
        code, msg = "E_DATA", str(exc)
    except (TrainingError, FloatingPointError) as exc:
        code, msg = "E_TRAIN", str(exc)
    except Exception as exc:  # anything unforeseen still gets a single parsable line
        code, msg = "E_INTERNAL", f"{type(exc).__name__}: {exc}"
    print(f"{code}: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
