"""Experiment harness: configuration, replication runner, MSE/cost series,
rate diagnostics and cost reporting.

An experiment runs R independent full pipelines (coarse chain + parallel
corrections), checkpoints the self-normalised estimate on a powers-of-two
iteration grid, and reports MSE against a ground truth together with both
wall-clock and modeled cost (particle x Euler-micro-step units; slope
checks use the modeled cost so they are machine independent).

All randomness is drawn from hierarchical streams keyed by
(seed, replicate, phase, index): outputs are bit-identical for any worker
count, except for the wall-clock columns, which are inherently timing
dependent and kept out of determinism comparisons.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .delta_pf import delta_batch_estimates
from .pmmh import (AdaptiveProposal, HmmPmmhTarget, ThetaOnly,
                   estimates_at_checkpoints, jump_chain_section, run_corrections,
                   run_pmmh)
from .rmlmc import LevelDistribution, finite_mean_cost
from .util import batch_means_se, fit_line, stream


class ConfigError(ValueError):
    """Invalid run configuration; message carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"config error at {path!r}: {message}")


class NumericalFailure(RuntimeError):
    """An estimator or diagnostic degenerated (exit code 3 territory)."""


# ---------------------------------------------------------------------------
# functionals of (theta, path) and of batched paths

class ThetaIdentityF(ThetaOnly):
    """f(theta, x) = theta (posterior mean of the parameters)."""

    def __init__(self):
        super().__init__(None)

    def __call__(self, theta, path):
        return theta


class TerminalCoordF:
    """f(theta, x) = terminal state coordinate j."""

    theta_only = False

    def __init__(self, coord: int = 0):
        self.coord = coord

    def __call__(self, theta, path):
        return path[-1, self.coord]


F_REGISTRY = {
    "theta": ThetaIdentityF(),
    "terminal_state": TerminalCoordF(0),
}


class BatchTerminalCoord:
    """Batched path functional: terminal coordinate of (B, N, n+1, d) paths."""

    def __init__(self, coord: int = 0):
        self.coord = coord

    def __call__(self, paths):
        return paths[..., -1, self.coord]


# ---------------------------------------------------------------------------
# configuration

_LEVEL_DIST_FORMS = ("geometric", "log_adjusted")


@dataclass(frozen=True)
class RunConfig:
    """One experiment: model, data, allocation, chain and output settings."""

    model: str
    theta_true: tuple
    n_obs: int
    level_dist: dict
    l_max: int
    iters: int
    replications: int
    seed: int
    outdir: str
    n0: int = 200
    eps: float = 1e-6
    n_base: int | None = None
    rho: float = 0.0
    level: int = 0
    burn_in_frac: float = 0.5
    thin: int = 10
    workers: int = 1
    f: str = "theta"
    variant: str = "average"
    scheme: str = "multinomial"
    proposal_scale: float = 0.1
    adapt_frac: float = 0.5
    gamma2: float = 1.0
    x0: float | tuple = 0.0
    level_offset: int = 0
    data_level: int | None = None
    data_csv: str | None = None
    truth: dict = field(default_factory=lambda: {"kind": "exact_mcmc"})

    def distribution(self) -> LevelDistribution:
        form = self.level_dist["form"]
        if form == "geometric":
            return LevelDistribution.geometric(self.level_dist["r"], self.l_max)
        return LevelDistribution.log_adjusted(self.level_dist["b"],
                                              self.level_dist.get("eta", 2.0),
                                              self.l_max)

    def functional(self):
        return F_REGISTRY[self.f]


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a JSON config document; errors name the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    for key in raw:
        _require(key in known, key, "unknown field")
    for key in ("model", "n_obs", "level_dist", "l_max", "iters",
                "replications", "seed", "outdir", "theta_true"):
        _require(key in raw, key, "required field missing")
    _require(raw["model"] in ("ou", "gbm", "pearson"), "model",
             f"unknown model {raw['model']!r}")
    for key in ("n_obs", "n0", "l_max", "iters", "replications"):
        if key in raw:
            _require(isinstance(raw[key], int) and raw[key] >= 1, key,
                     "must be a positive integer")
    ld = raw["level_dist"]
    _require(isinstance(ld, dict) and ld.get("form") in _LEVEL_DIST_FORMS,
             "level_dist.form", f"must be one of {_LEVEL_DIST_FORMS}")
    if ld["form"] == "geometric":
        _require("r" in ld and ld["r"] > 0, "level_dist.r", "must be positive")
    else:
        _require("b" in ld and ld["b"] > 0, "level_dist.b", "must be positive")
    if "eps" in raw:
        _require(raw["eps"] >= 0, "eps", "must be >= 0")
    if "thin" in raw:
        _require(isinstance(raw["thin"], int) and raw["thin"] >= 1, "thin",
                 "must be a positive integer")
    if "burn_in_frac" in raw:
        _require(0 <= raw["burn_in_frac"] < 1, "burn_in_frac", "must be in [0, 1)")
    if "workers" in raw:
        _require(isinstance(raw["workers"], int) and raw["workers"] >= 1,
                 "workers", "must be a positive integer")
    if "f" in raw:
        _require(raw["f"] in F_REGISTRY, "f",
                 f"unknown functional; known: {sorted(F_REGISTRY)}")
    if "truth" in raw:
        _require(isinstance(raw["truth"], dict) and "kind" in raw["truth"],
                 "truth.kind", "required")
        _require(raw["truth"]["kind"] in ("given", "exact_mcmc", "average_corrected"),
                 "truth.kind", "must be given | exact_mcmc | average_corrected")
        if raw["truth"]["kind"] == "given":
            _require("value" in raw["truth"], "truth.value", "required for kind=given")
    if raw["model"] == "pearson":
        _require(raw.get("data_csv") is not None or raw.get("data_level") is not None,
                 "data_level", "pearson data must come from a CSV or a simulation level")
        if "x0" in raw:
            _require(isinstance(raw["x0"], (list, tuple)) and len(raw["x0"]) == 2,
                     "x0", "pearson needs a 2-component initial state")
    cleaned = dict(raw)
    cleaned["theta_true"] = tuple(np.atleast_1d(raw["theta_true"]).tolist())
    if isinstance(raw.get("x0"), (list, tuple)):
        cleaned["x0"] = tuple(raw["x0"])
    # model-appropriate defaults (0 is a valid value, so no falsy tricks)
    if "x0" not in raw:
        cleaned["x0"] = {"ou": 0.0, "gbm": 1.0,
                         "pearson": tuple(models.PEARSON_X0.tolist())}[raw["model"]]
    if "level_offset" not in raw and raw["model"] == "gbm":
        cleaned["level_offset"] = 5
    return RunConfig(**cleaned)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def build_problem(config: RunConfig) -> models.HmmProblem:
    """Observations (simulated or loaded) wrapped into the model's problem."""
    theta = np.asarray(config.theta_true, dtype=float)
    if config.data_csv is not None:
        ys = models.load_observations(config.data_csv)
    else:
        rng = stream(config.seed, "data")
        kwargs = {}
        if config.model in ("ou", "gbm"):
            kwargs["gamma2"] = config.gamma2
        if config.model == "pearson" and config.level_offset:
            kwargs["level_offset"] = config.level_offset
        ys = models.simulate_data(config.model, theta, config.n_obs, rng,
                                  level=config.data_level, **kwargs)
    if config.model == "ou":
        return models.ou_problem(ys, gamma2=config.gamma2,
                                 x0=float(np.atleast_1d(config.x0)[0]))
    if config.model == "gbm":
        return models.gbm_problem(ys, gamma2=config.gamma2,
                                  x0=float(np.atleast_1d(config.x0)[0]),
                                  level_offset=config.level_offset)
    return models.pearson_problem(ys, x0=np.atleast_1d(np.asarray(config.x0, dtype=float)),
                                  level_offset=config.level_offset)


# ---------------------------------------------------------------------------
# one replicate of the full pipeline

@dataclass(frozen=True)
class ReplicateOutput:
    estimates: np.ndarray      # (n_checkpoints, d_f)
    cost_model: np.ndarray     # cumulative modeled cost at each checkpoint
    cost_seconds: np.ndarray   # cumulative wall estimate at each checkpoint
    level_counts: dict         # level -> (count, total modeled cost)
    acceptance_rate: float
    final_estimate: np.ndarray


def checkpoint_grid(n_retained: int, first: int = 8) -> np.ndarray:
    cps = []
    c = first
    while c < n_retained:
        cps.append(c)
        c *= 2
    cps.append(n_retained)
    return np.array(sorted(set(cps)))


def run_replicate(problem: models.HmmProblem, config: RunConfig,
                  rep_index: int) -> ReplicateOutput:
    """P1 chain, P2 corrections, and checkpointed estimates for one replicate."""
    dist = config.distribution()
    f = config.functional()
    d = len(config.theta_true)
    rng = stream(config.seed, "rep", rep_index, "chain")
    target = HmmPmmhTarget(problem, config.level)
    proposal = AdaptiveProposal(d, init_cov=np.eye(d) * config.proposal_scale ** 2)
    result = run_pmmh(target, config.n0, config.iters, rng, eps=config.eps,
                      proposal=proposal, scheme=config.scheme,
                      adapt_until=int(config.adapt_frac * config.iters))

    burn = int(config.burn_in_frac * config.iters)
    section = jump_chain_section(result.jump_chain, burn + 1, config.iters,
                                 config.thin)
    records = run_corrections(section, problem, dist, config.n0, config.eps,
                              seed=(config.seed, "rep", rep_index), workers=1,
                              variant=config.variant, scheme=config.scheme,
                              rho=config.rho, n_base=config.n_base)

    n_retained = sum(s.holding for s in section)
    cps = checkpoint_grid(n_retained)
    ests = estimates_at_checkpoints(records, f, cps)

    # cumulative costs at each checkpoint (raw chain cost + started corrections)
    p1_cum = np.cumsum(result.iter_model_cost)
    raw_iters = burn + cps * config.thin
    raw_iters = np.minimum(raw_iters, config.iters)
    starts = np.array([r.start_iter for r in records])
    corr_model = np.array([r.cost_model for r in records])
    corr_wall = np.array([r.cost_seconds for r in records])
    started = starts[None, :] <= cps[:, None]
    cost_model = p1_cum[raw_iters - 1] + started @ corr_model
    wall_p1 = result.wall_seconds
    cost_seconds = wall_p1 * raw_iters / config.iters + started @ corr_wall

    counts: dict[int, list] = {}
    for r in records:
        entry = counts.setdefault(r.level, [0, 0.0])
        entry[0] += 1
        entry[1] += r.cost_model
    return ReplicateOutput(estimates=np.atleast_2d(ests), cost_model=cost_model,
                           cost_seconds=cost_seconds,
                           level_counts={k: tuple(v) for k, v in counts.items()},
                           acceptance_rate=result.acceptance_rate,
                           final_estimate=np.atleast_1d(ests[-1]))


def _replicate_task(args):
    problem, config, rep_index = args
    return run_replicate(problem, config, rep_index)


# ---------------------------------------------------------------------------
# the experiment

@dataclass(frozen=True)
class MseSeries:
    """Per-checkpoint replication summary of one experiment."""

    checkpoints: np.ndarray
    cost_model: np.ndarray
    cost_seconds: np.ndarray
    mse: np.ndarray
    estimates: np.ndarray      # (R, n_checkpoints, d_f)
    truth: np.ndarray
    level_counts: dict
    acceptance_rates: np.ndarray


def compute_truth(config: RunConfig, problem: models.HmmProblem,
                  mcmc_steps: int = 400_000) -> np.ndarray | None:
    """Ground truth per the configured oracle; None means defer to the
    average of corrected replicate estimates."""
    kind = config.truth.get("kind", "exact_mcmc")
    if kind == "given":
        return np.atleast_1d(np.asarray(config.truth["value"], dtype=float))
    if kind == "average_corrected":
        return None
    level = config.truth.get("level")
    steps = int(config.truth.get("steps", mcmc_steps))
    ys = problem.observations
    if config.model == "ou":
        if level is None:
            def loglik(theta):
                return models.ou_exact_loglik(theta, ys, config.gamma2)
        else:
            def loglik(theta):
                return models.ou_level_loglik(theta, ys, level, config.gamma2)
    elif config.model == "gbm":
        def loglik(theta):
            return models.gbm_exact_loglik(theta, ys, config.gamma2)
    else:
        raise ConfigError("truth.kind", "exact_mcmc oracle exists only for ou/gbm")
    samples, _ = exact_posterior_mcmc(loglik, problem.prior, steps,
                                      stream(config.seed, "truth"))
    return samples[steps // 2:].mean(axis=0)


def retained_iterations(config: RunConfig) -> int:
    burn = int(config.burn_in_frac * config.iters)
    return (config.iters - (burn + 1)) // config.thin + 1


def run_experiment(config: RunConfig, problem: models.HmmProblem | None = None,
                   truth: np.ndarray | None = None) -> MseSeries:
    """R independent pipelines, checkpointed estimates, MSE against truth."""
    if problem is None:
        problem = build_problem(config)
    if truth is None:
        truth = compute_truth(config, problem)

    tasks = [(problem, config, i) for i in range(config.replications)]
    if config.workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_replicate_task, tasks))
    else:
        outputs = [_replicate_task(t) for t in tasks]

    cps = checkpoint_grid(retained_iterations(config))
    estimates = np.stack([o.estimates for o in outputs])
    cost_model = np.stack([o.cost_model for o in outputs]).mean(axis=0)
    cost_seconds = np.stack([o.cost_seconds for o in outputs]).mean(axis=0)

    if truth is None:
        truth = estimates[:, -1, :].mean(axis=0)
    truth = np.atleast_1d(truth)
    err = estimates - truth[None, None, :]
    mse = np.mean(np.sum(err * err, axis=-1), axis=0)

    level_counts: dict[int, list] = {}
    for o in outputs:
        for lvl, (cnt, cm) in o.level_counts.items():
            entry = level_counts.setdefault(lvl, [0, 0.0])
            entry[0] += cnt
            entry[1] += cm
    return MseSeries(checkpoints=cps, cost_model=cost_model,
                     cost_seconds=cost_seconds, mse=mse, estimates=estimates,
                     truth=truth,
                     level_counts={k: tuple(v) for k, v in sorted(level_counts.items())},
                     acceptance_rates=np.array([o.acceptance_rate for o in outputs]))


def write_artifacts(config: RunConfig, series: MseSeries, outdir=None,
                    observations=None) -> Path:
    """Spec'd CSV artifact set; wall-clock lives only in its own columns/file."""
    out = Path(outdir if outdir is not None else config.outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if observations is not None:
        models.save_observations(out / "data.csv", observations)
    with open(out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "iters", "cost_s", "cost_model", "mse"])
        for j, cp in enumerate(series.checkpoints):
            w.writerow([j, int(cp), repr(float(series.cost_seconds[j])),
                        repr(float(series.cost_model[j])), repr(float(series.mse[j]))])
    d_f = series.estimates.shape[-1]
    for i in range(series.estimates.shape[0]):
        with open(out / f"replicate_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "iters"] + [f"est{j}" for j in range(d_f)])
            for j, cp in enumerate(series.checkpoints):
                w.writerow([j, int(cp)] +
                           [repr(float(v)) for v in series.estimates[i, j]])
    with open(out / "levels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "count", "cost_model"])
        for lvl, (cnt, cm) in series.level_counts.items():
            w.writerow([lvl, cnt, repr(float(cm))])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "cost_s"])
        for j in range(len(series.checkpoints)):
            w.writerow([j, repr(float(series.cost_seconds[j]))])
    return out


# ---------------------------------------------------------------------------
# rate diagnostics

@dataclass(frozen=True)
class RateRow:
    level: int
    n_samples: int
    mean: float
    mean_se: float
    second_moment: float
    variance: float
    degenerate: bool


@dataclass(frozen=True)
class RateTable:
    rows: list
    slope_abs_mean: float | None
    slope_second_moment: float | None
    slope_variance: float | None
    slope_ses: dict

    def levels(self):
        return [r.level for r in self.rows]


def _rate_chunk(args):
    problem, theta, level, n_particles, n_runs, seed_parts, variant, phi = args
    model = problem.coupled_model(np.asarray(theta), level, variant)
    rng = stream(*seed_parts)
    return delta_batch_estimates(model, n_particles, n_runs, rng, phi)


def rate_diagnostics(problem: models.HmmProblem, theta, levels, n_particles,
                     reps, seed: int, workers: int = 1, phi=None,
                     variant: str = "average", chunk_size: int = 1000) -> RateTable:
    """Empirical moments of the coupled-increment estimator per level.

    ``reps`` and ``n_particles`` are ints or per-level mappings (the mean of
    the increment is particle-count free, so means may be measured with more
    particles than the fixed-N variance rows).  Rows with all-zero samples
    are flagged degenerate and excluded from the least-squares log2 slope
    fits (slopes are None when fewer than two usable rows remain).
    """
    levels = list(levels)
    if len(levels) < 3:
        raise ValueError("need at least three levels to fit rates")
    per_level = {l: (reps[l] if isinstance(reps, dict) else int(reps)) for l in levels}
    parts_for = {l: (n_particles[l] if isinstance(n_particles, dict) else int(n_particles))
                 for l in levels}
    tasks = []
    for level in levels:
        total = per_level[level]
        n_chunks = max(1, math.ceil(total / chunk_size))
        sizes = [total // n_chunks + (1 if i < total % n_chunks else 0)
                 for i in range(n_chunks)]
        for i, size in enumerate(sizes):
            tasks.append((problem, np.asarray(theta, dtype=float), level,
                          parts_for[level], size, (seed, "rate", level, i), variant, phi))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_rate_chunk, tasks))
    else:
        results = [_rate_chunk(t) for t in tasks]

    by_level = {l: [] for l in levels}
    for task, res in zip(tasks, results):
        by_level[task[2]].append(res)
    rows = []
    for level in levels:
        samples = np.concatenate(by_level[level])
        degenerate = bool(np.all(samples == 0.0))
        rows.append(RateRow(
            level=level, n_samples=samples.size, mean=float(samples.mean()),
            mean_se=float(samples.std(ddof=1) / np.sqrt(samples.size)),
            second_moment=float(np.mean(samples ** 2)),
            variance=float(samples.var(ddof=1)), degenerate=degenerate))

    usable = [r for r in rows if not r.degenerate]
    slopes = {"abs_mean": (None, None), "second_moment": (None, None),
              "variance": (None, None)}
    if len(usable) >= 2:
        ls = np.array([r.level for r in usable], dtype=float)
        for key, vals in (("abs_mean", [abs(r.mean) for r in usable]),
                          ("second_moment", [r.second_moment for r in usable]),
                          ("variance", [r.variance for r in usable])):
            vals = np.asarray(vals)
            if np.all(vals > 0):
                slope, _, se = fit_line(ls, np.log2(vals))
                slopes[key] = (slope, se)
    return RateTable(rows=rows, slope_abs_mean=slopes["abs_mean"][0],
                     slope_second_moment=slopes["second_moment"][0],
                     slope_variance=slopes["variance"][0],
                     slope_ses={k: v[1] for k, v in slopes.items()})


def write_rate_table(table: RateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "n", "mean", "mean_se", "second_moment", "variance",
                    "degenerate"])
        for r in table.rows:
            w.writerow([r.level, r.n_samples, repr(r.mean), repr(r.mean_se),
                        repr(r.second_moment), repr(r.variance), r.degenerate])


# ---------------------------------------------------------------------------
# cost accounting

@dataclass(frozen=True)
class CostReport:
    rows: list                # (level, count, cost_model_total, wall_total)
    empirical_mean_cost: float
    finite_mean_flag: bool


def cost_model_report(records: list, dist: LevelDistribution,
                      gamma_cost: float = 1.0, rho: float = 0.0) -> CostReport:
    """Per-level realised costs plus the untruncated finite-mean-cost flag."""
    if not records:
        raise ValueError("no correction records")
    table: dict[int, list] = {}
    for r in records:
        entry = table.setdefault(r.level, [0, 0.0, 0.0])
        entry[0] += 1
        entry[1] += r.cost_model
        entry[2] += r.cost_seconds
    rows = [(lvl, cnt, cm, cs) for lvl, (cnt, cm, cs) in sorted(table.items())]
    mean_cost = sum(r.cost_model for r in records) / len(records)
    return CostReport(rows=rows, empirical_mean_cost=mean_cost,
                      finite_mean_flag=finite_mean_cost(dist, gamma_cost, rho))


def mse_cost_slope(series: MseSeries, cost_law: str = "inverse",
                   decades: float = 1.0) -> tuple[float, float]:
    """Fitted slope of log MSE over the last cost decade(s).

    ``cost_law="inverse"`` regresses on log cost (slope -1 means MSE ~ 1/cost);
    ``"log_over"`` regresses on log cost - log log cost (slope -1 means
    MSE ~ log(cost)/cost).
    """
    cost = np.asarray(series.cost_model, dtype=float)
    mse = np.asarray(series.mse, dtype=float)
    keep = cost >= cost[-1] / 10.0 ** decades
    cost, mse = cost[keep], mse[keep]
    if np.any(mse <= 0) or len(mse) < 3:
        raise NumericalFailure("cannot fit MSE-cost slope on degenerate series")
    x = np.log(cost)
    if cost_law == "log_over":
        x = x - np.log(np.log(cost))
    slope, _, se = fit_line(x, np.log(mse))
    return slope, se


# ---------------------------------------------------------------------------
# exact-likelihood MCMC oracle

def exact_posterior_mcmc(loglik, prior, n_steps: int, rng: np.random.Generator,
                         init_theta=None, adapt_frac: float = 0.25
                         ) -> tuple[np.ndarray, float]:
    """Random-walk Metropolis with the exact likelihood (ground-truth runs)."""
    theta = prior.sample(rng) if init_theta is None else np.asarray(init_theta, float)
    d = theta.size
    lp = prior.logpdf(theta) + loglik(theta)
    proposal = AdaptiveProposal(d, init_cov=np.eye(d) * 0.04)
    samples = np.empty((n_steps, d))
    n_acc = 0
    adapt_until = int(adapt_frac * n_steps)
    for k in range(n_steps):
        cand = proposal.propose(theta, rng)
        lp_prior = prior.logpdf(cand)
        if np.isfinite(lp_prior):
            lp_cand = lp_prior + loglik(cand)
            if np.log(rng.random()) < lp_cand - lp:
                theta, lp = cand, lp_cand
                n_acc += 1
        samples[k] = theta
        proposal.observe(theta)
        if k == adapt_until:
            proposal.freeze()
    return samples, n_acc / n_steps


def posterior_mean_and_se(samples: np.ndarray, burn_frac: float = 0.5,
                          n_batches: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Post-burn-in mean with autocorrelation-adjusted (batch-means) s.e."""
    kept = samples[int(burn_frac * samples.shape[0]):]
    mean = kept.mean(axis=0)
    se = np.array([batch_means_se(kept[:, j], n_batches)
                   for j in range(kept.shape[1])])
    return mean, se
