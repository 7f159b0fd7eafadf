"""Command-line surface.

Subcommands:

- ``train --config FILE [--seed N] [--out DIR]`` run an experiment
- ``oracle --problem FILE --what WHAT`` print closed-form values as JSON
- ``analyze --run DIR --what WHAT`` conditioning/alignment/spike reports
- ``compare --run DIR [--oracle FILE]`` score a run against the oracle
- ``search --config FILE --kind {grid,random} --budget N [--out DIR]``
- ``plotdata --run DIR --series NAMES --out FILE`` two-column series

Exit codes: 0 success, 1 usage error, 2 invalid config, 3 runtime abort
(non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import bilevel
from ..models import NonFiniteLossError
from ..oracles import (
    OracleError, QuadraticProblem, RidgeProblem, bilevel_outer_grad,
    bilevel_solve, quadratic_br_jacobian, ridge_best_response,
    ridge_br_jacobian, stn_biased_fixed_point,
)
from .config import ConfigError, ExperimentConfig, build_problem
from .experiment import analyze_run, compare_with_oracle, run_experiment, write_plotdata

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we reserve that
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="selftune",
                     description="Bilevel hyperparameter tuning experiments")
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="run a configured experiment")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)

    p_oracle = sub.add_parser("oracle", help="print closed-form oracle values")
    p_oracle.add_argument("--problem", required=True)
    p_oracle.add_argument(
        "--what", required=True,
        choices=["best-response", "jacobian", "bilevel", "biased-fixed-point"])

    p_analyze = sub.add_parser("analyze", help="diagnostics over a run")
    p_analyze.add_argument("--run", required=True)
    p_analyze.add_argument("--what", required=True,
                           choices=["conditioning", "alignment", "spike"])

    p_compare = sub.add_parser("compare", help="score a run against the oracle")
    p_compare.add_argument("--run", required=True)
    p_compare.add_argument("--oracle", default=None,
                           help="optional config overriding the run's own")

    p_search = sub.add_parser("search", help="grid/random baseline search")
    p_search.add_argument("--config", required=True)
    p_search.add_argument("--kind", required=True, choices=["grid", "random"])
    p_search.add_argument("--budget", required=True, type=int)
    p_search.add_argument("--out", default=None)

    p_plot = sub.add_parser("plotdata", help="emit (step, value) series")
    p_plot.add_argument("--run", required=True)
    p_plot.add_argument("--series", required=True,
                        help="comma-separated series names")
    p_plot.add_argument("--out", required=True)
    return parser


def _load_oracle_problem(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _cmd_oracle(args) -> dict:
    spec = _load_oracle_problem(args.problem)
    kind = spec.get("kind")
    if kind == "quadratic":
        problem = QuadraticProblem(
            A=spec["A"], B=spec["B"], C=spec.get("C"), d=spec.get("d"),
            e=spec.get("e"), c=spec.get("c", 0.0))
        if args.what != "jacobian":
            raise OracleError("quadratic problems support --what jacobian")
        return {"theta_star": quadratic_br_jacobian(problem).tolist()}
    if kind != "ridge":
        raise OracleError(f"unknown problem kind {kind!r}")
    problem = RidgeProblem(
        X=spec["X"], t=spec["t"],
        X_valid=spec.get("X_valid", spec["X"]),
        t_valid=spec.get("t_valid", spec["t"]),
        penalty_scaling=spec.get("penalty_scaling", "per_n"),
        lambda_transform=spec.get("lambda_transform", "identity"),
    )
    lam = float(spec.get("lambda", 1.0))
    if args.what == "best-response":
        return {"lambda": lam,
                "w_star": ridge_best_response(problem, lam).tolist()}
    if args.what == "jacobian":
        return {"lambda": lam,
                "jacobian_raw": ridge_br_jacobian(problem, lam).tolist()}
    if args.what == "biased-fixed-point":
        theta = np.asarray(spec["theta"], dtype=np.float64)
        sigma = float(spec.get("sigma", 1.0))
        return {
            "lambda": lam, "sigma": sigma,
            "w0_biased": stn_biased_fixed_point(problem, lam, theta, sigma).tolist(),
            "w_star": ridge_best_response(problem, lam).tolist(),
        }
    bracket = spec.get("bracket")
    if bracket is None:
        raise OracleError("bilevel solve needs a 'bracket' [lo, hi] (raw coords)")
    lam_star = bilevel_solve(problem, tuple(bracket))
    return {
        "lambda_star_raw": lam_star,
        "outer_gradient_at_star": bilevel_outer_grad(problem, lam_star),
    }


def _cmd_search(args) -> dict:
    cfg = ExperimentConfig.from_file(args.config)
    problem = build_problem(cfg)
    space = cfg.search_space()
    best, trace = bilevel.baseline_search(
        args.kind, space, args.budget, problem,
        steps=cfg.steps, lr=float(cfg.raw["bilevel"]["alpha1"]),
        seed=cfg.seed,
        optimizer=cfg.raw["bilevel"]["inner_optimizer"],
    )
    report = {
        "kind": args.kind,
        "budget": args.budget,
        "best_lambda": best.tolist(),
        "candidates": trace,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "search.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "train":
            cfg_dict = ExperimentConfig.from_file(args.config).to_dict()
            if args.seed is not None:
                cfg_dict["seed"] = args.seed
            if args.out is not None:
                cfg_dict["out_dir"] = args.out
            cfg = ExperimentConfig.from_dict(cfg_dict)
            summary = run_experiment(cfg)
            print(json.dumps(summary, indent=2))
        elif args.command == "oracle":
            print(json.dumps(_cmd_oracle(args), indent=2))
        elif args.command == "analyze":
            print(json.dumps(analyze_run(args.run, args.what), indent=2))
        elif args.command == "compare":
            oracle_cfg = (ExperimentConfig.from_file(args.oracle)
                          if args.oracle else None)
            print(json.dumps(compare_with_oracle(args.run, oracle_cfg), indent=2))
        elif args.command == "search":
            print(json.dumps(_cmd_search(args), indent=2))
        elif args.command == "plotdata":
            series = [s for s in args.series.split(",") if s]
            written = write_plotdata(args.run, series, args.out)
            print(json.dumps({"written": written}, indent=2))
    except BrokenPipeError:
        # downstream consumer (head, less) closed the pipe; not an error
        try:
            sys.stdout.close()
        except OSError:
            pass
        return EXIT_OK
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (bilevel.RunAbort, NonFiniteLossError) as exc:
        payload = {"error": str(exc)}
        if isinstance(exc, bilevel.RunAbort):
            payload["snapshot"] = exc.snapshot
        print(json.dumps(payload, indent=2), file=sys.stderr)
        return EXIT_RUNTIME
    except (OracleError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
