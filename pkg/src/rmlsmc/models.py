"""Benchmark HMM diffusions and their exact likelihood oracles.

Three models: a mean-reverting Ornstein-Uhlenbeck process (constant
diffusion coefficient, so coupled Euler attains strong rate 2), a
driftless geometric Brownian motion observed on the log scale (rate 1),
and a two-dimensional nonlinear Pearson diffusion.  Observations arrive at
unit-spaced times 1..T from a fixed x0; ``observations[t]`` in code is the
(t+1)-th physical observation, aligned with Feynman-Kac time t.

Observation potentials include the Gaussian normalising constants, so the
unnormalised smoother of 1 equals the marginal likelihood computed by the
Kalman recursions here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .delta_pf import CoupledEulerHmmModel
from .fk import FeynmanKacModel
from .sde import DiffusionSpec, EulerHmmModel, LevelGrid, euler_transition

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# priors

@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    var: float

    def logpdf(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        d = theta.size
        resid = theta - self.mean
        return float(-0.5 * (d * (_LOG_2PI + math.log(self.var))
                             + resid @ resid / self.var))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + math.sqrt(self.var) * rng.standard_normal(self.mean.shape)


@dataclass(frozen=True)
class UniformBoxPrior:
    lo: np.ndarray
    hi: np.ndarray

    def logpdf(self, theta: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        if np.all((theta >= self.lo) & (theta <= self.hi)):
            return float(-np.sum(np.log(self.hi - self.lo)))
        return -np.inf

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random(self.lo.shape)


# ---------------------------------------------------------------------------
# diffusion coefficients

class OuDiffusion(DiffusionSpec):
    """dX = -e^theta1 X dt + e^theta2 dW (constant diffusion coefficient)."""

    dim = 1
    noise_dim = 1
    level_offset = 0

    def drift(self, theta, x):
        return -math.exp(theta[0]) * x

    def diffusion_apply(self, theta, x, dw):
        return math.exp(theta[1]) * dw

    def make_stepper(self, theta, h):
        g = 1.0 - math.exp(theta[0]) * h
        s = math.exp(theta[1]) * math.sqrt(h)

        def step(x, xi):
            return g * x + s * xi

        return step


class GbmDiffusion(DiffusionSpec):
    """dX = e^theta X dW; step grid shifted (h_l = 2^-(5+l)) for stability."""

    dim = 1
    noise_dim = 1

    def __init__(self, level_offset: int = 5):
        self.level_offset = level_offset

    def drift(self, theta, x):
        return np.zeros_like(x)

    def diffusion_apply(self, theta, x, dw):
        return math.exp(theta[0]) * x * dw

    def make_stepper(self, theta, h):
        s = math.exp(theta[0]) * math.sqrt(h)

        def step(x, xi):
            return x * (1.0 + s * xi)

        return step


class PearsonDiffusion(DiffusionSpec):
    """dX = rho (X - mu) dt + sigma D(X) dW with D = diag(sqrt(1 + x_j^2)).

    theta packs (rho11, rho12, rho22, mu1, mu2, sigma11, sigma12, sigma22,
    Sigma11, Sigma22): symmetric matrices contribute three slots each, the
    observation variances fill the last two.  The drift sign follows the
    displayed dynamics; mean reversion comes from negative rho diagonals.

    Unit steps (h = 1) are unstable for this model (the rho diagonal can
    reach -2 and the diffusion grows with |x|), so desk-scale runs shift
    the grid like the log-scale model does.
    """

    dim = 2
    noise_dim = 2

    def __init__(self, level_offset: int = 0):
        self.level_offset = level_offset

    @staticmethod
    def unpack(theta):
        rho = np.array([[theta[0], theta[1]], [theta[1], theta[2]]])
        mu = np.array([theta[3], theta[4]])
        sigma = np.array([[theta[5], theta[6]], [theta[6], theta[7]]])
        return rho, mu, sigma

    def drift(self, theta, x):
        rho, mu, _ = self.unpack(theta)
        return (x - mu) @ rho.T

    def diffusion_apply(self, theta, x, dw):
        _, _, sigma = self.unpack(theta)
        return (np.sqrt(1.0 + x * x) * dw) @ sigma.T

    def make_stepper(self, theta, h):
        rho, mu, sigma = self.unpack(theta)
        rho_h = rho.T * h
        sigma_s = sigma.T * math.sqrt(h)

        def step(x, xi):
            return x + (x - mu) @ rho_h + (np.sqrt(1.0 + x * x) * xi) @ sigma_s

        return step


# ---------------------------------------------------------------------------
# observation potentials (log scale, normalised densities)

class GaussianStateObs:
    """Y_t ~ N(X_t, gamma2 I); non-finite states get potential zero."""

    def __init__(self, observations: np.ndarray, gamma2: float):
        self.observations = np.atleast_2d(np.asarray(observations, dtype=float))
        self.gamma2 = float(gamma2)

    def log_potential(self, theta, t, x):
        y = self.observations[t]
        resid = x - y
        lg = -0.5 * (resid * resid / self.gamma2 + _LOG_2PI
                     + math.log(self.gamma2)).sum(axis=-1)
        ok = np.all(np.isfinite(x), axis=-1)
        return np.where(ok, lg, -np.inf)


class LogStateObs:
    """Y_t ~ N(log X_t, gamma2); kills non-positive or diverged states."""

    def __init__(self, observations: np.ndarray, gamma2: float):
        self.observations = np.atleast_2d(np.asarray(observations, dtype=float))
        self.gamma2 = float(gamma2)

    def log_potential(self, theta, t, x):
        y = self.observations[t]
        ok = np.all(np.isfinite(x), axis=-1) & np.all(x > 0, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            resid = np.where(ok[..., None], np.log(np.where(x > 0, x, 1.0)), 0.0) - y
            lg = -0.5 * (resid * resid / self.gamma2 + _LOG_2PI
                         + math.log(self.gamma2)).sum(axis=-1)
        return np.where(ok, lg, -np.inf)


class DiagGaussianObsFromTheta:
    """Y_t ~ N(X_t, diag(Sigma)) with Sigma taken from trailing theta slots."""

    def __init__(self, observations: np.ndarray, var_slots: tuple = (8, 9)):
        self.observations = np.atleast_2d(np.asarray(observations, dtype=float))
        self.var_slots = var_slots

    def log_potential(self, theta, t, x):
        var = np.array([theta[j] for j in self.var_slots])
        if np.any(var <= 0):
            return np.full(x.shape[:-1], -np.inf)
        y = self.observations[t]
        resid = x - y
        lg = -0.5 * (resid * resid / var + _LOG_2PI + np.log(var)).sum(axis=-1)
        ok = np.all(np.isfinite(x), axis=-1)
        return np.where(ok, lg, -np.inf)


@dataclass(frozen=True)
class BoundPotential:
    """Observation potential with theta bound (picklable for worker pools)."""

    obs_model: object
    theta: np.ndarray

    def __call__(self, t, x):
        return self.obs_model.log_potential(self.theta, t, x)


# ---------------------------------------------------------------------------
# the inference problem bundle

@dataclass(frozen=True)
class HmmProblem:
    """Diffusion + observations + prior: everything the samplers need."""

    diffusion: DiffusionSpec
    obs_model: object
    observations: np.ndarray
    x0: np.ndarray
    prior: object

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0] - 1

    def log_g(self, theta) -> BoundPotential:
        return BoundPotential(self.obs_model, np.asarray(theta, dtype=float))

    def level_model(self, theta, level: int) -> EulerHmmModel:
        return EulerHmmModel(self.diffusion, theta, level, self.log_g(theta),
                             self.x0, self.n_steps)

    def coupled_model(self, theta, level: int, variant: str = "average") -> CoupledEulerHmmModel:
        return CoupledEulerHmmModel(self.diffusion, theta, level, self.log_g(theta),
                                    self.x0, self.n_steps, variant=variant)


def ou_problem(observations, gamma2: float = 1.0, prior_var: float = 0.1,
               x0: float = 0.0) -> HmmProblem:
    obs = np.atleast_2d(np.asarray(observations, dtype=float).reshape(-1, 1))
    return HmmProblem(OuDiffusion(), GaussianStateObs(obs, gamma2), obs,
                      np.array([float(x0)]), GaussianPrior(np.zeros(2), prior_var))


def gbm_problem(observations, gamma2: float = 1.0, prior_var: float = 0.1,
                x0: float = 1.0, level_offset: int = 5) -> HmmProblem:
    obs = np.atleast_2d(np.asarray(observations, dtype=float).reshape(-1, 1))
    return HmmProblem(GbmDiffusion(level_offset), LogStateObs(obs, gamma2), obs,
                      np.array([float(x0)]), GaussianPrior(np.zeros(1), prior_var))


PEARSON_TRUE_THETA = np.array(
    [-0.5, 0.25, -0.75, 1.0, 2.0, 0.5, -0.25, 0.75, 0.25, 0.25])
PEARSON_PRIOR_LO = np.array([-2.0, -1.0, -2.0, -0.2, 1.6, 0.0, -8.3, 0.0, 0.0, 0.0])
PEARSON_PRIOR_HI = np.array([0.0, 1.0, 0.0, 1.0, 3.0, 6.6, 1.8, 7.2, 1.0, 1.0])
PEARSON_X0 = np.array([1.0, 2.0])


def pearson_problem(observations, x0=PEARSON_X0, level_offset: int = 0) -> HmmProblem:
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    return HmmProblem(PearsonDiffusion(level_offset), DiagGaussianObsFromTheta(obs),
                      obs, np.asarray(x0, dtype=float),
                      UniformBoxPrior(PEARSON_PRIOR_LO, PEARSON_PRIOR_HI))


class OuExactModel(FeynmanKacModel):
    """OU HMM with the exact Gaussian transition (no discretisation)."""

    def __init__(self, theta, observations, gamma2: float = 1.0, x0: float = 0.0):
        self.theta = np.asarray(theta, dtype=float)
        obs = np.atleast_2d(np.asarray(observations, dtype=float).reshape(-1, 1))
        self.obs_model = GaussianStateObs(obs, gamma2)
        self.n_steps = obs.shape[0] - 1
        self.state_dim = 1
        a, b = math.exp(self.theta[0]), math.exp(self.theta[1])
        self._f = math.exp(-a)
        self._sd = math.sqrt(b * b / (2.0 * a) * (1.0 - math.exp(-2.0 * a)))
        self.x0 = float(x0)

    def _step(self, x, rng):
        return self._f * x + self._sd * rng.standard_normal(x.shape)

    def sample_initial(self, shape, rng):
        x = np.full(shape + (1,), self.x0)
        return self._step(x, rng)

    def sample_step(self, t, x_prev, rng):
        return self._step(x_prev, rng)

    def log_potential(self, t, x, history=None):
        return self.obs_model.log_potential(self.theta, t, x)


# ---------------------------------------------------------------------------
# Kalman recursions (scalar linear-Gaussian chains)

def kalman_step(m_prev: float, c_prev: float, y: float, a: float, b: float,
                gamma2: float) -> tuple[float, float, float]:
    """One exact-transition OU filter update.

    Returns (m_k, c_k, incremental log-likelihood log P[y_k | y_{1:k-1}]).
    """
    if a <= 0:
        raise ValueError("mean-reversion rate a must be positive")
    f = math.exp(-a)
    s = b * b / (2.0 * a) * (1.0 - math.exp(-2.0 * a))
    return _affine_kalman_step(m_prev, c_prev, y, f, s, 0.0, gamma2)


def _affine_kalman_step(m_prev, c_prev, y, f, s, drift, gamma2):
    """Filter update for x' = f x + drift + N(0, s), y = x' + N(0, gamma2)."""
    if gamma2 <= 0:
        raise ValueError("observation variance must be positive")
    if c_prev < 0:
        raise ValueError("state variance must be nonnegative")
    m_hat = f * m_prev + drift
    c_hat = f * f * c_prev + s
    if c_hat <= 0:
        raise ValueError("predicted variance is nonpositive")
    c_new = 1.0 / (1.0 / gamma2 + 1.0 / c_hat)
    combo = y / gamma2 + m_hat / c_hat
    m_new = c_new * combo
    loglik = 0.5 * math.log(c_new / (2.0 * math.pi * c_hat * gamma2)) \
        - 0.5 * (y * y / gamma2 + m_hat * m_hat / c_hat - c_new * combo * combo)
    return m_new, c_new, loglik


def ou_level_params(a: float, b: float, level: int, offset: int = 0) -> tuple[float, float]:
    """One-observation-interval mean factor and variance of level-l Euler OU.

    K steps of x <- (1 - a h) x + b sqrt(h) xi compose to a single affine
    Gaussian map with factor (1 - a h)^K and variance
    b^2 h sum_{j<K} (1 - a h)^(2j).
    """
    grid = LevelGrid(level, offset)
    h, k = grid.h, grid.steps
    g = 1.0 - a * h
    r = g * g
    if abs(r - 1.0) < 1e-14:
        var = b * b * h * k
    else:
        var = b * b * h * (1.0 - r ** k) / (1.0 - r)
    return g ** k, var


def _kalman_chain(f, s, drift, gamma2, ys, m0, c0):
    """Run the affine-Gaussian filter over all observations.

    Returns (total log-likelihood, terminal filter mean, terminal variance).
    """
    m, c, total = float(m0), float(c0), 0.0
    for y in np.asarray(ys, dtype=float).reshape(-1):
        m, c, inc = _affine_kalman_step(m, c, float(y), f, s, drift, gamma2)
        total += inc
    return total, m, c


def ou_exact_loglik(theta, ys, gamma2: float = 1.0, x0: float = 0.0) -> float:
    a, b = math.exp(theta[0]), math.exp(theta[1])
    f = math.exp(-a)
    s = b * b / (2.0 * a) * (1.0 - math.exp(-2.0 * a))
    return _kalman_chain(f, s, 0.0, gamma2, ys, x0, 0.0)[0]


def ou_level_loglik_ab(a: float, b: float, ys, level: int, gamma2: float = 1.0,
                       x0: float = 0.0, offset: int = 0) -> float:
    """Exact marginal likelihood of the level-l Euler-discretised OU model."""
    f, s = ou_level_params(a, b, level, offset)
    return _kalman_chain(f, s, 0.0, gamma2, ys, x0, 0.0)[0]


def ou_level_loglik(theta, ys, level: int, gamma2: float = 1.0, x0: float = 0.0,
                    offset: int = 0) -> float:
    return ou_level_loglik_ab(math.exp(theta[0]), math.exp(theta[1]), ys, level,
                              gamma2, x0, offset)


def ou_level_filter_moments(theta, ys, level: int, gamma2: float = 1.0,
                            x0: float = 0.0, offset: int = 0) -> tuple[float, float]:
    """Terminal filter mean and variance of the level-l Euler OU model."""
    a, b = math.exp(theta[0]), math.exp(theta[1])
    f, s = ou_level_params(a, b, level, offset)
    _, m, c = _kalman_chain(f, s, 0.0, gamma2, ys, x0, 0.0)
    return m, c


def gbm_exact_loglik(theta, ys, gamma2: float = 1.0, z0: float = 0.0) -> float:
    """Exact marginal likelihood via the transformed log-scale random walk.

    Z_{k+1} = Z_k - a^2/2 + a W_k with unit-time Gaussian increments, so the
    likelihood is a scalar Kalman chain with unit mean factor.
    """
    a = math.exp(np.asarray(theta, dtype=float).reshape(-1)[0])
    return _kalman_chain(1.0, a * a, -0.5 * a * a, gamma2, ys, z0, 0.0)[0]


# ---------------------------------------------------------------------------
# data simulation and observation files

def simulate_ou_data(theta, n_obs: int, rng: np.random.Generator,
                     gamma2: float = 1.0, x0: float = 0.0,
                     level: int | None = None) -> np.ndarray:
    """Observations y_1..y_T; exact transitions unless a level is given."""
    theta = np.asarray(theta, dtype=float)
    x = np.array([x0])
    spec = OuDiffusion()
    if level is None:
        a, b = math.exp(theta[0]), math.exp(theta[1])
        f = math.exp(-a)
        sd = math.sqrt(b * b / (2.0 * a) * (1.0 - math.exp(-2.0 * a)))
    ys = np.empty((n_obs, 1))
    for t in range(n_obs):
        if level is None:
            x = f * x + sd * rng.standard_normal(1)
        else:
            x = euler_transition(spec, theta, LevelGrid(level), x, rng)
        ys[t] = x + math.sqrt(gamma2) * rng.standard_normal(1)
    return ys


def simulate_gbm_data(theta, n_obs: int, rng: np.random.Generator,
                      gamma2: float = 1.0, x0: float = 1.0,
                      level: int | None = None, level_offset: int = 5) -> np.ndarray:
    """Log-scale observations; exact log-space recursion unless a level is given."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    a = math.exp(theta[0])
    ys = np.empty((n_obs, 1))
    if level is None:
        z = math.log(x0)
        for t in range(n_obs):
            z = z - 0.5 * a * a + a * rng.standard_normal()
            ys[t] = z + math.sqrt(gamma2) * rng.standard_normal()
        return ys
    spec = GbmDiffusion(level_offset)
    x = np.array([x0])
    for t in range(n_obs):
        x = euler_transition(spec, theta, LevelGrid(level, level_offset), x, rng)
        ys[t] = np.log(x) + math.sqrt(gamma2) * rng.standard_normal()
    return ys


def simulate_pearson_data(theta, n_obs: int, rng: np.random.Generator,
                          level: int, x0=PEARSON_X0,
                          level_offset: int = 0) -> np.ndarray:
    """Fine-level Euler simulation plus diagonal Gaussian observation noise."""
    theta = np.asarray(theta, dtype=float)
    spec = PearsonDiffusion(level_offset)
    sd = np.sqrt(np.array([theta[8], theta[9]]))
    x = np.asarray(x0, dtype=float).copy()
    ys = np.empty((n_obs, 2))
    for t in range(n_obs):
        x = euler_transition(spec, theta, LevelGrid(level, level_offset), x, rng)
        ys[t] = x + sd * rng.standard_normal(2)
    return ys


def simulate_data(family: str, theta, n_obs: int, rng: np.random.Generator,
                  level: int | None = None, **kwargs) -> np.ndarray:
    if family == "ou":
        return simulate_ou_data(theta, n_obs, rng, level=level, **kwargs)
    if family == "gbm":
        return simulate_gbm_data(theta, n_obs, rng, level=level, **kwargs)
    if family == "pearson":
        if level is None:
            raise ValueError("pearson data needs an explicit simulation level")
        return simulate_pearson_data(theta, n_obs, rng, level=level, **kwargs)
    raise ValueError(f"unknown model family {family!r}")


def save_observations(path, ys) -> None:
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y{j}" for j in range(ys.shape[1])])
        for t, row in enumerate(ys, start=1):
            writer.writerow([t] + [repr(float(v)) for v in row])


def load_observations(path) -> np.ndarray:
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append([float(v) for v in row[1:]])
    return np.asarray(rows)
