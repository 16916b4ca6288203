"""Command-line front end: ``pilotwave <verb> --config FILE [--out DIR] [--seed N] [--threads N]``."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .errors import ConfigError, PilotWaveError
from .scenarios import RunReport, diff_reports, load_config, run_scenario

VERB_TASKS = {
    "evolve": ("evolve",),
    "trajectories": ("trajectories",),
    "classify": ("classify",),
    "anyon-phase": ("anyon-phase",),
    "spin-protocol": ("spin-protocol",),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="scenario INI file or bundled scenario name")
    p.add_argument("--out", default=None, help="output directory (default: [output] dir)")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--threads", type=int, default=None, help="FFT worker cap")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pilotwave", description="Pilot-wave exchange-symmetry scenarios")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in (*VERB_TASKS, "equilibrium", "run"):
        _common(sub.add_parser(verb))
    d = sub.add_parser("diff-reports", help="compare two report.json files")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--atol", type=float, default=0.0)
    d.add_argument("--rtol", type=float, default=0.0)
    return ap


def _tasks_for(verb: str, configured: tuple[str, ...]) -> tuple[str, ...]:
    if verb == "run":
        return configured
    if verb == "equilibrium":
        picked = tuple(t for t in configured if t in ("equivariance", "nelson"))
        return picked or ("equivariance",)
    return VERB_TASKS[verb]


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "diff-reports":
        try:
            res = diff_reports(RunReport.load(args.a), RunReport.load(args.b), args.atol, args.rtol)
        except (OSError, KeyError, json.JSONDecodeError, PilotWaveError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(json.dumps(res, indent=2, sort_keys=True))
        return 0 if res["identical"] else 1
    overrides = {}
    if args.seed is not None:
        overrides[("scenario", "seed")] = str(args.seed)
    try:
        cfg = load_config(args.config, overrides)
        report = run_scenario(cfg, args.out, args.threads, _tasks_for(args.verb, cfg.scenario.tasks))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value} {c.comparison} {c.tolerance}")
    print(f"report: {report.exit_code and 'FAILED' or 'passed'} ({len(report.checks)} checks)")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
