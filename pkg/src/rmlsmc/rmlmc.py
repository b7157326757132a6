"""Level randomisation: distributions on levels, debiased single-term
estimators, the self-normalised parallel estimator, and allocation planning.

Sampling the correction level L from a distribution p and weighting the
coupled-filter increment by 1/p_L removes the residual discretisation bias
in expectation.  "Infinity" is operationalised as a finite truncation
l_max: with support 1..l_max the telescoping sum is exact, so estimators
are unbiased for the level-l_max model and exactly testable against
per-level oracles.  Truncated masses are renormalised over the support
(the lost mass is below 2^-l_max for the defaults).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .delta_pf import delta_batch_from, delta_estimate, run_delta_pf
from .fk import WeightedCloud, smoother_estimate
from .pf import pf_batch_estimates, run_filter_batch, run_pf

DEFAULT_L_MAX = 30


class PlannerError(ValueError):
    """No feasible allocation for the requested rate parameters."""


class ContractViolation(ValueError):
    """An estimator was called outside its contract (e.g. p_L = 0)."""


@dataclass(frozen=True)
class LevelDistribution:
    """Probability mass on correction levels 1..l_max with exact lookup.

    Forms: geometric ``p_l ~ 2^(-r l)`` and log-adjusted
    ``p_l ~ 2^(-2 b l) * l * log2(l+1)^eta``.
    """

    probs: np.ndarray
    form: str
    params: dict

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("level distribution needs a nonempty 1-d mass vector")
        if np.any(p <= 0):
            raise ValueError("level masses must be strictly positive on the support")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("level masses must sum to one")

    @classmethod
    def geometric(cls, r: float, l_max: int = DEFAULT_L_MAX) -> "LevelDistribution":
        levels = np.arange(1, l_max + 1)
        w = np.exp2(-r * levels)
        return cls(w / w.sum(), "geometric", {"r": float(r), "l_max": int(l_max)})

    @classmethod
    def log_adjusted(cls, b: float, eta: float = 2.0,
                     l_max: int = DEFAULT_L_MAX) -> "LevelDistribution":
        levels = np.arange(1, l_max + 1)
        w = np.exp2(-2.0 * b * levels) * levels * np.log2(levels + 1) ** eta
        return cls(w / w.sum(), "log_adjusted",
                   {"b": float(b), "eta": float(eta), "l_max": int(l_max)})

    @property
    def l_max(self) -> int:
        return self.probs.size

    def mass(self, level: int) -> float:
        if not 1 <= level <= self.l_max:
            raise ValueError(f"level {level} outside support 1..{self.l_max}")
        return float(self.probs[level - 1])

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        level = int(np.searchsorted(self.cumulative(), rng.random(), side="right")) + 1
        level = min(level, self.l_max)
        return level, self.mass(level)

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        levels = np.searchsorted(self.cumulative(), u, side="right") + 1
        return np.minimum(levels, self.l_max)


def sample_level(dist: LevelDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Draw L ~ p, returning the level with its exact mass."""
    return dist.sample(rng)


@dataclass(frozen=True)
class AllocationPlan:
    """Rates (beta, alpha, gamma, rho) plus the planned level distribution.

    The particle rule is N_l = n_base * ceil(2^(rho l)); rho = 0 means a
    constant particle count across levels.
    """

    beta: float
    alpha: float
    gamma_cost: float
    rho: float
    form: str
    params: dict

    def __post_init__(self):
        if self.beta > 2 * self.alpha + 1e-12:
            raise ValueError("rate invariant beta <= 2*alpha violated")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")

    def distribution(self, l_max: int = DEFAULT_L_MAX) -> LevelDistribution:
        if self.form == "geometric":
            return LevelDistribution.geometric(self.params["r"], l_max)
        return LevelDistribution.log_adjusted(self.params["b"], self.params["eta"], l_max)

    def particles(self, level: int, n_base: int) -> int:
        return int(n_base * math.ceil(2.0 ** (self.rho * level)))


def plan_allocation(beta: float, alpha: float, gamma_cost: float,
                    rho: float | None = None) -> AllocationPlan:
    """Pick (p_l, N_l) for the given strong/weak/cost rates.

    beta > 1 with a nonempty interval (gamma(1+rho), min(beta+rho, 2 alpha))
    admits a geometric p with finite variance and finite expected cost; the
    midpoint is used (r = 1.5 for the beta=2, alpha=gamma=1 case).  In the
    subcanonical regime beta <= 1 the log-adjusted form with b = alpha keeps
    the variance finite; rho may be 0 (default, no particle scaling) or the
    variance-reduced 2*alpha - beta.
    """
    if beta <= 0 or alpha <= 0 or gamma_cost <= 0:
        raise PlannerError("rates beta, alpha, gamma must be positive")
    if beta > 2 * alpha + 1e-12:
        raise PlannerError(f"beta={beta} > 2*alpha={2 * alpha}: weak/strong rate "
                           "invariant beta <= 2*alpha violated")
    rho_val = 0.0 if rho is None else float(rho)
    if rho_val < 0:
        raise PlannerError("rho must be >= 0")
    lo = gamma_cost * (1.0 + rho_val)
    hi = min(beta + rho_val, 2.0 * alpha)
    if lo < hi:
        r = 0.5 * (lo + hi)
        return AllocationPlan(beta, alpha, gamma_cost, rho_val, "geometric", {"r": r})
    if beta <= 1.0:
        return AllocationPlan(beta, alpha, gamma_cost, rho_val, "log_adjusted",
                              {"b": float(alpha), "eta": 2.0})
    raise PlannerError(
        f"infeasible: r interval ({lo:g}, {hi:g}) is empty; requires "
        f"gamma*(1+rho) = {lo:g} < min(beta+rho, 2*alpha) = {hi:g}")


def finite_mean_cost(dist: LevelDistribution, gamma_cost: float = 1.0,
                     rho: float = 0.0) -> bool:
    """Whether the untruncated form of ``dist`` gives finite expected cost.

    Tests convergence of sum_l p_l 2^(gamma(1+rho) l): geometric needs
    r > gamma(1+rho); the log-adjusted form needs 2b > gamma(1+rho)
    (at equality the l*log^eta factor still diverges).
    """
    g = gamma_cost * (1.0 + rho)
    if dist.form == "geometric":
        return dist.params["r"] > g
    return 2.0 * dist.params["b"] > g


def zeta_estimate(base_cloud: WeightedCloud, delta_cloud: WeightedCloud,
                  level: int, p_level: float, g) -> float | np.ndarray:
    """Single-term debiased estimator: base estimate + Delta_L(g) / p_L.

    With level support truncated at l_max the expectation is exactly the
    level-l_max unnormalised smoother of g.
    """
    if p_level <= 0:
        raise ContractViolation(f"level mass p_L must be positive, got {p_level}")
    return smoother_estimate(base_cloud, g) + delta_estimate(delta_cloud, g) / p_level


@dataclass(frozen=True)
class UnbiasedRun:
    """One base filter run plus one randomised coupled correction."""

    base_cloud: WeightedCloud
    delta_cloud: WeightedCloud
    level: int
    p_level: float

    def zeta(self, g) -> float | np.ndarray:
        return zeta_estimate(self.base_cloud, self.delta_cloud, self.level,
                             self.p_level, g)


def run_unbiased_estimator(base_model, coupled_factory, dist: LevelDistribution,
                           n_particles: int, rng: np.random.Generator,
                           scheme: str = "multinomial",
                           n_particles_for=None) -> UnbiasedRun:
    """One draw of the randomised debiased estimator.

    ``coupled_factory(level)`` builds the coupled model for that level;
    ``n_particles_for(level)`` optionally overrides the correction particle
    count (defaults to ``n_particles``).
    """
    base_cloud = run_pf(base_model, n_particles, rng, scheme)
    level, p_level = dist.sample(rng)
    n_corr = n_particles if n_particles_for is None else n_particles_for(level)
    delta_cloud = run_delta_pf(coupled_factory(level), n_corr, rng, scheme)
    return UnbiasedRun(base_cloud, delta_cloud, level, p_level)


def zeta_batch(base_model, coupled_factory, dist: LevelDistribution,
               n_particles: int, n_runs: int, rng: np.random.Generator,
               phi=None, scheme: str = "multinomial",
               n_particles_for=None) -> tuple[np.ndarray, np.ndarray]:
    """``n_runs`` independent zeta(phi) draws, vectorised by level groups.

    Returns (zeta values, sampled levels).  ``phi`` follows the batched
    path-functional convention of :func:`rmlsmc.pf.pf_batch_estimates`; a
    list of functionals is evaluated on the same runs (one Algorithm-3 draw
    yields the whole zeta vector), giving zeta values of shape
    (n_runs, len(phi)).
    """
    phis = phi if isinstance(phi, (list, tuple)) else [phi]
    levels = dist.sample_batch(rng, n_runs)
    base = run_filter_batch(base_model, n_particles, n_runs, rng, scheme)
    zeta = np.stack([pf_batch_estimates(base, p) for p in phis], axis=1)
    for level in np.unique(levels):
        rows = np.flatnonzero(levels == level)
        n_corr = n_particles if n_particles_for is None else n_particles_for(int(level))
        model = coupled_factory(int(level))
        corr = run_filter_batch(model, n_corr, rows.size, rng, scheme)
        for j, p in enumerate(phis):
            zeta[rows, j] += delta_batch_from(model, corr, p) / dist.mass(int(level))
    if not isinstance(phi, (list, tuple)):
        return zeta[:, 0], levels
    return zeta, levels


def ratio_estimator(zeta_phi: np.ndarray, zeta_one: np.ndarray) -> tuple[float, float]:
    """Self-normalised estimate sum zeta_k(phi) / sum zeta_k(1) with a
    plug-in CLT variance.

    The returned sigma2 estimates the asymptotic variance of
    sqrt(M) * (estimate - truth); the standard error of the estimate is
    sqrt(sigma2 / M).
    """
    zp = np.asarray(zeta_phi, dtype=float)
    zo = np.asarray(zeta_one, dtype=float)
    if zp.shape != zo.shape or zp.ndim != 1:
        raise ValueError("zeta value arrays must be equal-length vectors")
    m = zp.size
    if m < 2:
        raise ValueError("need at least two zeta pairs")
    denom = zo.sum()
    if denom == 0:
        raise ContractViolation("degenerate normaliser: sum of zeta_k(1) is zero")
    estimate = zp.sum() / denom
    xi = zp - estimate * zo
    sigma2 = float(np.mean(xi ** 2) / np.mean(zo) ** 2)
    return float(estimate), sigma2
