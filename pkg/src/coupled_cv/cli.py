"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 certification failure,
3 runtime failure (non-meeting chains, IO).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_config
from .estimator import NonMeetingError
from .harness import emit_outputs, fit_only, meeting_times, run_certification, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_CERT, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coupled-cv", description="Unbiased MCMC with Stein control variates")
    parser.add_argument("-v", "--verbose", action="store_true", help="log applied defaults and progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="replicate, fit control variates and write CSV outputs")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--out")

    cert = sub.add_parser("certify", help="certify the variance bound on the finite oracle chain")
    cert.add_argument("--config", required=True)
    cert.add_argument("--out")

    mt = sub.add_parser("meeting-times", help="emit meeting times and a fitted geometric envelope")
    mt.add_argument("--config", required=True)
    mt.add_argument("--out")

    fit = sub.add_parser("fit-cv", help="fit control variates and print the coefficients")
    fit.add_argument("--config", required=True)
    return parser


def _load(args):
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run = dataclasses.replace(cfg.run, root_seed=args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg.run = dataclasses.replace(cfg.run, workers=args.workers)
    if getattr(args, "out", None):
        cfg.run = dataclasses.replace(cfg.run, out_dir=args.out)
    return cfg


def _cmd_run(cfg) -> int:
    report = run_experiment(cfg, out_dir=cfg.run.out_dir)
    for path in emit_outputs(report, cfg.run.out_dir):
        print(path)
    for coord, strat, mean, var, vr in report.summary:
        print(f"x{coord} {strat:>9}: mean={mean:.6g} var={var:.3g} vr={vr:.3g}")
    return EXIT_OK


def _cmd_certify(cfg) -> int:
    report = run_certification(cfg)
    counts = {}
    for row in report.rows:
        counts[row.status] = counts.get(row.status, 0) + 1
    main = report.by_check("main_bound")[0]
    print(f"checks: {counts}; main bound sd={main.empirical:.6g} rhs={main.bound:.6g} margin={main.margin:.6g}")
    print(Path(cfg.run.out_dir) / "certification.csv")
    return EXIT_CERT if report.failed else EXIT_OK


def _cmd_meeting_times(cfg) -> int:
    taus, fit = meeting_times(cfg)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "meeting_times.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["replicate", "tau"])
        writer.writerows(enumerate(taus))
    print(f"tau: min={min(taus)} median={np.median(taus):g} max={max(taus)}")
    if fit is None:
        print("fewer than 100 meeting times; no envelope fitted")
    else:
        with open(out / "tail_envelope.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["C", "delta", "degenerate"])
            writer.writerow([format(fit.C, ".17g"), format(fit.delta, ".17g"), fit.degenerate])
        print(f"envelope: C={fit.C:.6g} delta={fit.delta:.6g}{' (degenerate)' if fit.degenerate else ''}")
    return EXIT_OK


def _cmd_fit_cv(cfg) -> int:
    fits = fit_only(cfg)
    for (coord, approach), fit in sorted(fits.items()):
        theta = " ".join(f"{v:.10g}" for v in fit.theta.theta)
        print(f"x{coord} {approach}: theta=[{theta}] objective {fit.objective_before:.6g} -> {fit.objective_after:.6g}")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "certify": _cmd_certify, "meeting-times": _cmd_meeting_times, "fit-cv": _cmd_fit_cv}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonMeetingError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
