"""Coarse-level particle marginal Metropolis-Hastings with randomised
multilevel corrections and importance-sampling-type estimators.

Phase 1 runs a pseudo-marginal chain on (theta, particle cloud) using the
level-0 filter likelihood plus a small constant eps in the acceptance
ratio (eps > 0 keeps the corrected estimator consistent even when a
proposal's filter returns a zero likelihood estimate).  The chain is kept
as a jump chain: accepted states with holding times.

Phase 2 attaches, to each accepted state, one independent coupled-filter
correction at a randomly drawn level.  Correction k draws its RNG stream
from (seed, "corr", k), so results are identical for any worker count or
scheduling.  The correction is reused for every iteration of its holding
block: the assembled estimator weights each block's base and correction
terms by the holding time, which reproduces the plain per-iteration
estimator exactly and keeps the jump representation consistent.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .delta_pf import run_delta_pf_detailed
from .models import HmmProblem
from .pf import run_pf
from .rmlmc import LevelDistribution
from .util import logsumexp_rows, stream


class PmmhInitError(ValueError):
    """Could not construct a valid initial chain state."""


class DegenerateNormaliser(ZeroDivisionError):
    """The self-normalised estimator's denominator vanished."""


# ---------------------------------------------------------------------------
# proposals

def adapt_proposal(history: np.ndarray, lam: float = 1e-6) -> np.ndarray:
    """Random-walk covariance (2.38^2/d) * empirical cov + lam * I."""
    history = np.atleast_2d(np.asarray(history, dtype=float))
    n, d = history.shape
    if n < 2:
        raise ValueError("need at least two samples to adapt")
    emp = np.atleast_2d(np.cov(history, rowvar=False, ddof=1))
    return (2.38 ** 2 / d) * emp + lam * np.eye(d)


class AdaptiveProposal:
    """Gaussian random walk whose covariance tracks the chain history.

    Running mean/covariance are updated each observation (Welford); the
    proposal covariance is refreshed from them until frozen, after which
    the kernel is a fixed Metropolis random walk.
    """

    def __init__(self, dim: int, init_cov=None, lam: float = 1e-6):
        self.dim = dim
        self.lam = lam
        cov = np.eye(dim) * 0.01 if init_cov is None else np.atleast_2d(init_cov)
        self._chol = np.linalg.cholesky(cov)
        self._count = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))
        self.frozen = False

    def propose(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return theta + self._chol @ rng.standard_normal(self.dim)

    def log_q(self, from_theta, to_theta) -> float:
        return 0.0

    def observe(self, theta: np.ndarray) -> None:
        if self.frozen:
            return
        self._count += 1
        delta = theta - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, theta - self._mean)
        if self._count > self.dim + 1:
            emp = self._m2 / (self._count - 1)
            cov = (2.38 ** 2 / self.dim) * emp + self.lam * np.eye(self.dim)
            self._chol = np.linalg.cholesky(cov)

    def freeze(self) -> None:
        self.frozen = True


# ---------------------------------------------------------------------------
# phase 1: the jump chain

@dataclass(frozen=True)
class HmmPmmhTarget:
    """PMMH target: prior plus the level-bound filter model."""

    problem: HmmProblem
    level: int = 0

    @property
    def prior(self):
        return self.problem.prior

    def model(self, theta):
        return self.problem.level_model(theta, self.level)


@dataclass(frozen=True)
class JumpState:
    """One accepted PMMH state with its holding time.

    ``log_v`` are the per-particle log weights of the accepted filter run;
    ``paths`` the materialised trajectories (N, n+1, d).
    """

    index: int
    start_iter: int
    holding: int
    theta: np.ndarray
    log_v: np.ndarray
    log_sum_v: float
    paths: np.ndarray


@dataclass(frozen=True)
class PmmhResult:
    jump_chain: list
    n_iters: int
    n_accepted: int
    eps: float
    iter_model_cost: np.ndarray
    wall_seconds: float

    @property
    def acceptance_rate(self) -> float:
        # The initial state is not an acceptance event.
        return (self.n_accepted - 1) / max(self.n_iters, 1)


def _model_cost(model) -> float:
    steps = getattr(getattr(model, "grid", None), "steps", 1)
    return float(steps * (model.n_steps + 1))


def run_pmmh(target, n_particles: int, n_iters: int, rng: np.random.Generator,
             eps: float = 1e-6, proposal=None, init_theta=None,
             scheme: str = "multinomial", adapt_until: int | None = None,
             max_init_tries: int = 100) -> PmmhResult:
    """Phase-1 pseudo-marginal chain, returned as a jump chain.

    Acceptance uses (sum_i V-hat + eps) / (sum_i V + eps) times the prior
    and proposal ratios; proposals outside the prior support are rejected
    without running a filter.  The proposal adapts until ``adapt_until``
    (default: half the iterations), then freezes.
    """
    t_start = time.perf_counter()
    if eps < 0:
        raise ValueError("eps must be >= 0")
    prior = target.prior
    log_eps = np.log(eps) if eps > 0 else -np.inf

    if init_theta is None:
        theta = prior.sample(rng)
    else:
        theta = np.asarray(init_theta, dtype=float)
    log_prior = prior.logpdf(theta)
    if not np.isfinite(log_prior):
        raise PmmhInitError(f"prior density is zero at initial theta {theta}")

    if proposal is None:
        proposal = AdaptiveProposal(theta.size)
    if adapt_until is None:
        adapt_until = n_iters // 2

    cloud = None
    for attempt in range(max_init_tries):
        cand = run_pf(target.model(theta), n_particles, rng, scheme)
        if not cand.terminated:
            cloud = cand
            break
        if init_theta is None:
            theta = prior.sample(rng)
            log_prior = prior.logpdf(theta)
    if cloud is None:
        raise PmmhInitError(
            f"no initial state with positive likelihood estimate in {max_init_tries} tries")
    log_sum_v = float(logsumexp_rows(cloud.log_abs_weights[None, :])[0])
    log_lik = np.logaddexp(log_sum_v, log_eps)

    observe = getattr(proposal, "observe", lambda theta: None)
    freeze = getattr(proposal, "freeze", lambda: None)
    jump_chain: list[JumpState] = []
    iter_cost = np.zeros(n_iters)
    block_start = 1  # first iteration the current state covers
    n_accepted = 1

    def emit(state_theta, state_cloud, state_log_sum, end_iter):
        if end_iter < block_start:
            return  # state covered no iterations (replaced immediately)
        jump_chain.append(JumpState(
            index=len(jump_chain), start_iter=block_start,
            holding=end_iter - block_start + 1, theta=state_theta.copy(),
            log_v=state_cloud.log_abs_weights.copy(),
            log_sum_v=float(state_log_sum), paths=state_cloud.paths()))

    for k in range(1, n_iters + 1):
        theta_hat = proposal.propose(theta, rng)
        log_prior_hat = prior.logpdf(theta_hat)
        accept = False
        if np.isfinite(log_prior_hat):
            model = target.model(theta_hat)
            iter_cost[k - 1] = _model_cost(model) * n_particles
            cand = run_pf(model, n_particles, rng, scheme)
            cand_log_sum = float(logsumexp_rows(cand.log_abs_weights[None, :])[0])
            cand_log_lik = np.logaddexp(cand_log_sum, log_eps)
            log_ratio = (log_prior_hat + proposal.log_q(theta_hat, theta) + cand_log_lik
                         - log_prior - proposal.log_q(theta, theta_hat) - log_lik)
            accept = np.log(rng.random()) < log_ratio
        if accept:
            emit(theta, cloud, log_sum_v, k - 1)
            theta, log_prior = theta_hat, log_prior_hat
            cloud, log_sum_v, log_lik = cand, cand_log_sum, cand_log_lik
            block_start = k
            n_accepted += 1
        observe(theta)
        if k == adapt_until:
            freeze()
    emit(theta, cloud, log_sum_v, n_iters)
    return PmmhResult(jump_chain=jump_chain, n_iters=n_iters, n_accepted=n_accepted,
                      eps=eps, iter_model_cost=iter_cost,
                      wall_seconds=time.perf_counter() - t_start)


def jump_chain_section(chain: list, first_iter: int, last_iter: int,
                       thin: int = 1) -> list:
    """Jump chain of the burnt-in, thinned iteration sequence.

    Keeps iterations first, first+thin, ... <= last; holding times are
    re-counted in retained-iteration units and empty blocks dropped.
    """
    if thin < 1 or first_iter < 1:
        raise ValueError("need thin >= 1 and first_iter >= 1")
    out = []
    next_start = 1
    for state in chain:
        lo = max(state.start_iter, first_iter)
        hi = min(state.start_iter + state.holding - 1, last_iter)
        if hi < lo:
            continue
        # retained iterations are first + j*thin; count those in [lo, hi]
        j_lo = -((first_iter - lo) // thin)  # ceil((lo - first) / thin)
        j_hi = (hi - first_iter) // thin
        count = j_hi - j_lo + 1
        if count <= 0:
            continue
        out.append(replace(state, index=len(out), start_iter=next_start,
                           holding=count))
        next_start += count
    return out


# ---------------------------------------------------------------------------
# phase 2: randomised coupled-filter corrections

@dataclass(frozen=True)
class CorrectionRecord:
    """One accepted state's correction: level draw, weights and trajectories.

    ``w0`` are the base weights V^(i)/(sum V + eps) and ``wl`` the signed
    correction weights V_L^(i)/[p_L (sum V + eps)]; the holding time is kept
    separately and applied to the whole block at assembly time.
    ``log_coupled_v`` are the coupled-run log V-check weights used for
    trajectory subsampling.
    """

    index: int
    start_iter: int
    holding: int
    theta: np.ndarray
    level: int
    p_level: float
    w0: np.ndarray
    base_paths: np.ndarray
    wl: np.ndarray
    delta_paths: np.ndarray
    log_coupled_v: np.ndarray
    cost_model: float
    cost_seconds: float


def _correction_for_state(state: JumpState, problem: HmmProblem,
                          dist: LevelDistribution, n_particles: int, eps: float,
                          seed, variant: str, scheme: str,
                          rho: float = 0.0, n_base: int | None = None) -> CorrectionRecord:
    rng = stream(seed, "corr", state.index)
    t0 = time.perf_counter()
    level, p_level = dist.sample(rng)
    n_level = n_particles if n_base is None else int(n_base * np.ceil(2.0 ** (rho * level)))
    model = problem.coupled_model(state.theta, level, variant)
    cloud, log_v_check = run_delta_pf_detailed(model, n_level, rng, scheme)
    log_eps = np.log(eps) if eps > 0 else -np.inf
    log_denom = np.logaddexp(state.log_sum_v, log_eps)
    w0 = np.exp(state.log_v - log_denom)
    wl = cloud.signs * np.exp(cloud.log_abs_weights - np.log(p_level) - log_denom)
    grid_steps = model.grid_fine.steps
    cost_model = float(n_level * (grid_steps + grid_steps // 2) * (model.n_steps + 1))
    return CorrectionRecord(
        index=state.index, start_iter=state.start_iter, holding=state.holding,
        theta=state.theta, level=level, p_level=p_level, w0=w0,
        base_paths=state.paths, wl=wl, delta_paths=cloud.paths(),
        log_coupled_v=log_v_check, cost_model=cost_model,
        cost_seconds=time.perf_counter() - t0)


def _correction_chunk(args):
    states, problem, dist, n_particles, eps, seed, variant, scheme, rho, n_base = args
    return [_correction_for_state(s, problem, dist, n_particles, eps, seed,
                                  variant, scheme, rho, n_base) for s in states]


def run_corrections(jump_chain: list, problem: HmmProblem, dist: LevelDistribution,
                    n_particles: int, eps: float, seed, workers: int = 1,
                    variant: str = "average", scheme: str = "multinomial",
                    rho: float = 0.0, n_base: int | None = None) -> list:
    """One independent randomised coupled correction per accepted state.

    ``seed`` (an int or stream-path tuple) fixes correction k's RNG stream
    as (seed, "corr", k).  ``n_base`` switches on the particle rule
    N_l = n_base * ceil(2^(rho l)); otherwise every correction uses
    ``n_particles``.  Records are returned in jump-chain order regardless
    of scheduling.
    """
    if not jump_chain:
        raise ValueError("jump chain is empty")
    args = (problem, dist, n_particles, eps, seed, variant, scheme, rho, n_base)
    if workers <= 1 or len(jump_chain) < 4:
        return [_correction_for_state(s, *args) for s in jump_chain]
    chunks = [jump_chain[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_correction_chunk, [(c,) + args for c in chunks]))
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: r.index)
    return records


# ---------------------------------------------------------------------------
# estimators

class ThetaOnly:
    """Functional of theta alone; lets estimators skip per-path evaluation."""

    theta_only = True

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, theta, path):
        return self.fn(theta)


def _eval_f(f, theta, paths):
    """f evaluated on each trajectory; (K,) or (K, df) array."""
    return np.array([np.asarray(f(theta, paths[i]), dtype=float)
                     for i in range(paths.shape[0])])


def record_terms(record: CorrectionRecord, f,
                 corrections: bool = True) -> tuple[np.ndarray, float]:
    """Per-block numerator and denominator terms, without the holding time.

    numerator = sum_i w0_i f(theta, X_0^i) + sum_i wl_i f(theta, X_L^i);
    denominator = sum_i w0_i + sum_i wl_i.  ``corrections=False`` drops the
    level terms, leaving the coarse-chain-only contribution.
    """
    denom = float(record.w0.sum())
    if corrections:
        denom += float(record.wl.sum())
    if getattr(f, "theta_only", False):
        numer = np.asarray(f(record.theta, None), dtype=float) * denom
        return numer, denom
    numer = record.w0 @ _eval_f(f, record.theta, record.base_paths)
    if corrections:
        numer = numer + record.wl @ _eval_f(f, record.theta, record.delta_paths)
    return np.asarray(numer, dtype=float), denom


def is_estimate(records: list, f, corrections: bool = True):
    """Self-normalised estimator over the jump chain.

    Each block contributes holding * (base term + correction term) to both
    sums; strongly consistent for the ideal-model posterior expectation of
    ``f(theta, x_path)``.  ``corrections=False`` gives the uncorrected
    coarse-model posterior average (useful for bias comparisons).
    """
    numer = 0.0
    denom = 0.0
    for rec in records:
        n_k, d_k = record_terms(rec, f, corrections)
        numer = numer + rec.holding * n_k
        denom += rec.holding * d_k
    if denom == 0:
        raise DegenerateNormaliser("estimator denominator is zero")
    return numer / denom


def is_estimate_with_se(records: list, f, n_batches: int = 25,
                        corrections: bool = True):
    """Estimate plus a batch-means delta-method standard error.

    Blocks are grouped into contiguous batches by start iteration; the
    standard error treats per-batch (numerator, denominator) pairs as
    approximately independent.
    """
    total = max(r.start_iter + r.holding - 1 for r in records)
    n_batches = min(n_batches, len(records))
    dim = np.atleast_1d(np.asarray(f(records[0].theta,
                                     records[0].base_paths[0]), dtype=float)).size
    numers = np.zeros((n_batches, dim))
    denoms = np.zeros(n_batches)
    for rec in records:
        b = min((rec.start_iter - 1) * n_batches // total, n_batches - 1)
        n_k, d_k = record_terms(rec, f, corrections)
        numers[b] += rec.holding * np.atleast_1d(n_k)
        denoms[b] += rec.holding * d_k
    big_d = denoms.sum()
    if big_d == 0:
        raise DegenerateNormaliser("estimator denominator is zero")
    est = numers.sum(axis=0) / big_d
    xi = numers - est[None, :] * denoms[:, None]
    se = np.sqrt(np.sum(xi ** 2, axis=0) * n_batches / (n_batches - 1)) / abs(big_d)
    return est, se


def _categorical(weights: np.ndarray, rng: np.random.Generator) -> int:
    total = weights.sum()
    if total <= 0:
        return 0
    return int(np.searchsorted(np.cumsum(weights / total), rng.random(), side="right"))


def _categorical_log(log_w: np.ndarray, rng: np.random.Generator) -> int:
    m = np.max(log_w)
    if not np.isfinite(m):
        return 0
    return _categorical(np.exp(log_w - m), rng)


def is_estimate_subsampled(records: list, f, rng: np.random.Generator):
    """Memory-light variant keeping one trajectory per cloud.

    One base trajectory is drawn with probability proportional to V^(i)
    (its weight collapses to sum_i w0_i) and one coupled pair with
    probability proportional to V-check^(i); the pair's fine and coarse
    legs carry the summed positive and negative correction weights.  Same
    holding-time assembly as :func:`is_estimate`, higher variance (the full
    estimator is its Rao-Blackwellised version).
    """
    numer = 0.0
    denom = 0.0
    for rec in records:
        n_half = rec.log_coupled_v.shape[0]
        w_star0 = float(rec.w0.sum())
        w_star1 = float(rec.wl[:n_half].sum())
        w_star2 = float(rec.wl[n_half:].sum())
        d_k = w_star0 + w_star1 + w_star2
        if getattr(f, "theta_only", False):
            n_k = np.asarray(f(rec.theta, None), dtype=float) * d_k
        else:
            i_star = _categorical(rec.w0, rng)
            j_star = _categorical_log(rec.log_coupled_v, rng)
            n_k = (w_star0 * np.asarray(f(rec.theta, rec.base_paths[i_star]), dtype=float)
                   + w_star1 * np.asarray(f(rec.theta, rec.delta_paths[j_star]), dtype=float)
                   + w_star2 * np.asarray(f(rec.theta, rec.delta_paths[n_half + j_star]),
                                          dtype=float))
        numer = numer + rec.holding * n_k
        denom += rec.holding * d_k
    if denom == 0:
        raise DegenerateNormaliser("estimator denominator is zero")
    return numer / denom


def estimates_at_checkpoints(records: list, f, checkpoints) -> np.ndarray:
    """Estimator value using only iterations 1..c for each checkpoint c.

    A block straddling the cut contributes its truncated holding time; its
    correction enters as soon as the block has started.
    """
    checkpoints = np.asarray(checkpoints, dtype=int)
    numers = []
    denoms = []
    starts = np.array([r.start_iter for r in records])
    holds = np.array([r.holding for r in records])
    for rec in records:
        n_k, d_k = record_terms(rec, f)
        numers.append(np.atleast_1d(n_k))
        denoms.append(d_k)
    numers = np.stack(numers)
    denoms = np.asarray(denoms)
    eff = np.clip(checkpoints[:, None] - starts[None, :] + 1, 0, holds[None, :])
    den = eff @ denoms
    if np.any(den == 0):
        raise DegenerateNormaliser("estimator denominator is zero at a checkpoint")
    return (eff @ numers) / den[:, None]


# ---------------------------------------------------------------------------
# line-delimited checkpoint files

def save_jump_chain(path, result: PmmhResult) -> None:
    """One JSON object per accepted state (plus a header line)."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "pmmh_meta", "n_iters": result.n_iters,
                             "n_accepted": result.n_accepted, "eps": result.eps}) + "\n")
        for s in result.jump_chain:
            fh.write(json.dumps({
                "kind": "jump_state", "k": s.index, "start_iter": s.start_iter,
                "holding": s.holding, "theta": s.theta.tolist(),
                "log_v": s.log_v.tolist(), "log_sum_v": s.log_sum_v,
                "paths": s.paths.tolist()}) + "\n")


def load_jump_chain(path) -> tuple[list, dict]:
    chain = []
    meta = {}
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["kind"] == "pmmh_meta":
                meta = obj
            elif obj["kind"] == "jump_state":
                chain.append(JumpState(
                    index=obj["k"], start_iter=obj["start_iter"],
                    holding=obj["holding"], theta=np.array(obj["theta"]),
                    log_v=np.array(obj["log_v"]), log_sum_v=obj["log_sum_v"],
                    paths=np.array(obj["paths"])))
    return chain, meta


def save_corrections(path, records: list) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "kind": "correction", "k": r.index, "start_iter": r.start_iter,
                "holding": r.holding, "theta": r.theta.tolist(), "level": r.level,
                "p_level": r.p_level, "w0": r.w0.tolist(),
                "base_paths": r.base_paths.tolist(), "wl": r.wl.tolist(),
                "delta_paths": r.delta_paths.tolist(),
                "log_coupled_v": r.log_coupled_v.tolist(),
                "cost_model": r.cost_model, "cost_seconds": r.cost_seconds}) + "\n")


def load_corrections(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["kind"] != "correction":
                continue
            records.append(CorrectionRecord(
                index=obj["k"], start_iter=obj["start_iter"], holding=obj["holding"],
                theta=np.array(obj["theta"]), level=obj["level"],
                p_level=obj["p_level"], w0=np.array(obj["w0"]),
                base_paths=np.array(obj["base_paths"]), wl=np.array(obj["wl"]),
                delta_paths=np.array(obj["delta_paths"]),
                log_coupled_v=np.array(obj["log_coupled_v"]),
                cost_model=obj["cost_model"], cost_seconds=obj["cost_seconds"]))
    return records
