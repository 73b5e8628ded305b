"""Command-line entry point.

Exit status 0 on success.  On failure a single JSON object describing the
error is written to stderr and the exit status is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import experiment
from .config import load_config
from .errors import ConfigError, ValidationError
from .model import GENE_NAMES
from .oracle import compare_marginals


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parser():
    p = _Parser(prog="hybridffl", description="Hybrid feed-forward loop simulation, inference and learning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a trajectory and noisy observations")
    s.add_argument("config")
    s.add_argument("--out", required=True)

    for name, text in (("infer", "infer promoter/protein marginals"), ("learn", "fit kinetic parameters by variational EM")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--data", required=True, help="directory holding observations.csv")
        s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="compare two promoter-marginal CSV files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)

    s = sub.add_parser("run", help="full pipeline: simulate, observe, infer, learn")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    return p


def _eval(path_a, path_b):
    a = experiment.read_posterior(path_a)
    b = experiment.read_posterior(path_b)
    out = {}
    for g in GENE_NAMES:
        col = f"m_{g}"
        if col in a and col in b:
            c = compare_marginals((a["t"], a[col]), (b["t"], b[col]))
            out[g] = {
                "mean_abs_diff": c.mean_abs_diff,
                "max_abs_diff": c.max_abs_diff,
                "transition_time_diffs": c.transition_time_diffs,
                "unmatched": c.unmatched,
            }
    if not out:
        raise ValueError("no common promoter-marginal columns (m_M, m_S, m_T)")
    return out


def _error_payload(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["details"] = exc.errors
    elif isinstance(exc, ValidationError):
        payload["details"] = exc.violations
    return payload


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except _UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        if args.command == "eval":
            print(json.dumps(_eval(args.a, args.b), indent=2, sort_keys=True))
            return 0
        cfg = load_config(args.config)
        if args.command == "simulate":
            files = experiment.simulate_command(cfg, args.out)
        elif args.command == "infer":
            files = experiment.infer_command(cfg, args.data, args.out)
        elif args.command == "learn":
            files = experiment.learn_command(cfg, args.data, args.out)
        else:
            files = experiment.run_experiment(cfg, args.out)
        print(json.dumps({"written": sorted(str(p) for p in files.values())}, indent=2))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
