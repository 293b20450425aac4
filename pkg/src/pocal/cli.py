"""Command-line entry point: ``pocal {calibrate,path,benchmark,sobol}``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
numerical failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .errors import CalibrationError, NumericalError, StudyError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pocal", description="Penalized orthogonal calibration of computer models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="UTF-8 key = value config file")
        sp.add_argument("--seed", type=_u64, help="RNG seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--surrogate", choices=("ls", "gp"), help="least-squares or GP surrogate")

    for name, text in (("calibrate", "full run: path, BIC selection, classification"),
                       ("path", "lambda path only"),
                       ("sobol", "Sobol total indices only")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        if name != "sobol":
            sp.add_argument("--lambda-grid", help="auto | auto:N | log:LO:HI:N | comma-separated values")
    sp = sub.add_parser("benchmark", help="Monte-Carlo study on the synthetic ten-parameter model")
    common(sp, config_required=False)
    sp.add_argument("--replicates", type=int, help="number of replicates")
    sp.add_argument("--workers", type=int, help="worker processes")
    return p


def _run_config(args):
    from .pipeline import RunConfig

    over = {"seed": args.seed, "out": args.out, "surrogate": args.surrogate,
            "lambda_grid": getattr(args, "lambda_grid", None)}
    return RunConfig.from_file(args.config, **over)


def _benchmark_config(args):
    from .benchmark import BenchmarkConfig
    from .pipeline import parse_key_values, parse_vector

    kw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = parse_key_values(fh.read(), args.config)
        except OSError as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        types = {f.name: f.type for f in fields(BenchmarkConfig)}
        out = raw.pop("out", None)
        for k, v in raw.items():
            if k not in types:
                raise ValidationError(f"unknown benchmark config key {k!r}")
            default = getattr(BenchmarkConfig, k)
            try:
                if isinstance(default, tuple):
                    kw[k] = parse_vector(v, k)
                elif isinstance(default, bool):
                    kw[k] = v.strip().lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kw[k] = int(v)
                elif isinstance(default, float):
                    kw[k] = float(v)
                else:
                    kw[k] = v.strip()
            except ValueError as exc:
                raise ValidationError(f"{k}: cannot parse {v!r}") from exc
        if out and not args.out:
            args.out = os.path.join(os.path.dirname(os.path.abspath(args.config)), out)
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.surrogate:
        kw["surrogate"] = "gp" if args.surrogate == "gp" else "parametric"
    if args.replicates is not None:
        kw["replicates"] = args.replicates
    if args.workers is not None:
        kw["workers"] = args.workers
    return BenchmarkConfig(**kw)


def _print(obj):
    print(json.dumps(obj, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)))


def _dispatch(args) -> None:
    if args.command == "benchmark":
        from .benchmark import run_study, write_report

        cfg = _benchmark_config(args)
        report = run_study(cfg)
        paths = write_report(report, args.out or "benchmark_out")
        _print({"mean_ie": report.mean_ie, "files": paths})
        return

    from . import pipeline

    cfg = _run_config(args)
    if args.command == "calibrate":
        run = pipeline.run_calibration(cfg)
    elif args.command == "path":
        run = pipeline.run_path(cfg)
    else:
        run = pipeline.run_sobol(cfg)
        _print({"sobol_total": run.sobol.total, "files": run.files})
        return
    s = run.summary
    _print({k: s[k] for k in ("theta_hat", "support", "selected_lambda", "loss_theta0", "loss_theta_hat")}
           | {"files": run.files})


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"pocal: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ValidationError as exc:
        print(f"pocal: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, StudyError, np.linalg.LinAlgError) as exc:
        print(f"pocal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CalibrationError as exc:
        print(f"pocal: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"pocal: I/O error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
