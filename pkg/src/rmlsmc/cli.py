"""Command-line interface: run experiments, fit rate diagnostics, plan
allocations, and query the exact-likelihood oracles.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness, models
from .harness import ConfigError, NumericalFailure
from .pmmh import DegenerateNormaliser, PmmhInitError
from .rmlmc import ContractViolation, PlannerError, plan_allocation
from .sde import DivergedPathError
from .util import stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _set_dotted(doc: dict, dotted: str, value: str) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    try:
        node[keys[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[keys[-1]] = value


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(override, "override must look like key=value")
        key, value = override.split("=", 1)
        _set_dotted(raw, key, value)
    config = harness.config_from_dict(raw)
    problem = harness.build_problem(config)
    series = harness.run_experiment(config, problem)
    out = harness.write_artifacts(config, series, observations=problem.observations)
    print(f"wrote artifacts to {out}")
    print(f"final MSE {series.mse[-1]:.6g} at modeled cost {series.cost_model[-1]:.6g}")
    return EXIT_OK


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def _build_cli_problem(args):
    theta = _parse_floats(args.theta)
    rng = stream(args.seed, "data")
    if args.data is not None:
        ys = models.load_observations(args.data)
    else:
        kwargs = {"gamma2": args.gamma2} if args.model in ("ou", "gbm") else {}
        ys = models.simulate_data(args.model, theta, args.n_obs, rng,
                                  level=args.data_level, **kwargs)
    if args.model == "ou":
        return models.ou_problem(ys, gamma2=args.gamma2), theta
    if args.model == "gbm":
        return models.gbm_problem(ys, gamma2=args.gamma2), theta
    return models.pearson_problem(ys), theta


def _cmd_rates(args) -> int:
    problem, theta = _build_cli_problem(args)
    levels = [int(v) for v in args.levels.split(",")]
    table = harness.rate_diagnostics(problem, theta, levels, args.particles,
                                     args.reps, args.seed, workers=args.workers)
    if args.out:
        harness.write_rate_table(table, args.out)
    for row in table.rows:
        flag = " (exact zero: flagged)" if row.degenerate else ""
        print(f"level {row.level}: mean {row.mean:+.4e} (se {row.mean_se:.1e}) "
              f"E[D^2] {row.second_moment:.4e} var {row.variance:.4e}{flag}")
    for name, slope in (("|mean|", table.slope_abs_mean),
                        ("second moment", table.slope_second_moment),
                        ("variance", table.slope_variance)):
        if slope is None:
            print(f"log2 slope of {name}: undefined (degenerate rows)")
        else:
            print(f"log2 slope of {name}: {slope:+.3f}")
    return EXIT_OK


def _cmd_plan(args) -> int:
    plan = plan_allocation(args.beta, args.alpha, args.gamma, rho=args.rho)
    doc = {"beta": plan.beta, "alpha": plan.alpha, "gamma_cost": plan.gamma_cost,
           "rho": plan.rho, "form": plan.form, "params": plan.params,
           "particle_rule": f"N_l = n_base * ceil(2^({plan.rho} * l))"}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _cmd_oracle(args) -> int:
    theta = _parse_floats(args.theta)
    ys = models.load_observations(args.data)
    if args.model == "ou":
        if args.level is None:
            value = models.ou_exact_loglik(theta, ys, args.gamma2, args.x0)
        else:
            value = models.ou_level_loglik(theta, ys, args.level, args.gamma2, args.x0)
    elif args.model == "gbm":
        if args.level is not None:
            raise ConfigError("level", "gbm oracle is exact only (no level argument)")
        value = models.gbm_exact_loglik(theta, ys, args.gamma2)
    else:
        raise ConfigError("model", "oracle exists only for ou/gbm")
    print(repr(float(value)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmlsmc",
        description="Bias-free Bayesian inference for noisily observed diffusions")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a (dotted) config field")
    p_run.set_defaults(fn=_cmd_run)

    p_rates = sub.add_parser("rates", help="coupled-increment moment/rate table")
    p_rates.add_argument("--model", required=True, choices=["ou", "gbm", "pearson"])
    p_rates.add_argument("--theta", required=True, help="comma-separated")
    p_rates.add_argument("--levels", default="2,3,4,5,6")
    p_rates.add_argument("--particles", type=int, default=20)
    p_rates.add_argument("--reps", type=int, default=2000)
    p_rates.add_argument("--n-obs", type=int, default=10)
    p_rates.add_argument("--gamma2", type=float, default=1.0)
    p_rates.add_argument("--seed", type=int, default=1)
    p_rates.add_argument("--workers", type=int, default=1)
    p_rates.add_argument("--data", help="observations CSV (simulated if absent)")
    p_rates.add_argument("--data-level", type=int, default=None)
    p_rates.add_argument("--out", help="write the per-level table as CSV")
    p_rates.set_defaults(fn=_cmd_rates)

    p_plan = sub.add_parser("plan", help="allocation plan for (beta, alpha, gamma)")
    p_plan.add_argument("--beta", type=float, required=True)
    p_plan.add_argument("--alpha", type=float, default=1.0)
    p_plan.add_argument("--gamma", type=float, default=1.0)
    p_plan.add_argument("--rho", type=float, default=None)
    p_plan.set_defaults(fn=_cmd_plan)

    p_oracle = sub.add_parser("oracle", help="exact/level marginal log-likelihood")
    p_oracle.add_argument("--model", required=True, choices=["ou", "gbm"])
    p_oracle.add_argument("--data", required=True, help="observations CSV")
    p_oracle.add_argument("--theta", required=True, help="comma-separated")
    p_oracle.add_argument("--gamma2", type=float, default=1.0)
    p_oracle.add_argument("--x0", type=float, default=0.0)
    p_oracle.add_argument("--level", type=int, default=None)
    p_oracle.set_defaults(fn=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (NumericalFailure, DegenerateNormaliser, ContractViolation,
            PmmhInitError, DivergedPathError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, PlannerError, FileNotFoundError, json.JSONDecodeError,
            ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
