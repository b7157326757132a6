"""Diffusion specifications, Euler-Maruyama levels and the coupled kernel.

A level-l discretisation uses step size h = 2^-(offset+l); one call of
:func:`euler_transition` advances a state across one unit observation
interval (K = 1/h steps).  The fine/coarse coupled transition drives both
chains with the same Brownian increments: the coarse chain consumes the
pairwise sums of the fine increments, which is what gives the strong
coupling rate beta (2 for constant diffusion coefficient, else 1).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .fk import FeynmanKacModel


class DivergedPathError(FloatingPointError):
    """An Euler path produced a non-finite state mid-interval."""

    def __init__(self, step: int, leg: str | None = None):
        self.step = step
        self.leg = leg
        where = f" ({leg} leg)" if leg else ""
        super().__init__(f"non-finite state at Euler micro-step {step}{where}")


class DiffusionSpec(abc.ABC):
    """Drift a(theta, x) and diffusion b(theta, x) of an Ito diffusion.

    ``diffusion_apply`` computes b(theta, x) @ dw without materialising the
    d x d' matrix; both methods are vectorised over leading axes of ``x``.
    ``level_offset`` shifts the level grid: h_l = 2^-(offset+l).
    """

    dim: int = 1
    noise_dim: int = 1
    level_offset: int = 0

    @abc.abstractmethod
    def drift(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def diffusion_apply(self, theta: np.ndarray, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        ...

    def make_stepper(self, theta, h: float):
        """One Euler micro-step x -> x + a h + b sqrt(h) xi as a closure.

        ``xi`` are standard normals.  Subclasses may override to precompute
        theta- and h-dependent constants (this loop dominates runtime).
        """
        sqrt_h = np.sqrt(h)

        def step(x, xi):
            return x + self.drift(theta, x) * h + self.diffusion_apply(theta, x, sqrt_h * xi)

        return step


@dataclass(frozen=True)
class LevelGrid:
    """Level index plus its step size; h * steps == 1 exactly."""

    level: int
    offset: int = 0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("level must be >= 0")
        if self.offset < 0:
            raise ValueError("level offset must be >= 0")

    @property
    def h(self) -> float:
        return 2.0 ** -(self.offset + self.level)

    @property
    def steps(self) -> int:
        return 2 ** (self.offset + self.level)


def _euler_steps(spec, theta, h, n_steps, x, rng, check: bool):
    step = spec.make_stepper(theta, h)
    noise_shape = x.shape[:-1] + (spec.noise_dim,)
    for j in range(n_steps):
        x = step(x, rng.standard_normal(noise_shape))
        if check and not np.all(np.isfinite(x)):
            raise DivergedPathError(j)
    return x


def euler_transition(spec: DiffusionSpec, theta, grid: LevelGrid, x: np.ndarray,
                     rng: np.random.Generator, on_divergence: str = "raise") -> np.ndarray:
    """Advance ``x`` one observation interval with K = 1/h Euler steps.

    ``on_divergence="raise"`` raises :class:`DivergedPathError` carrying the
    micro-step index; ``"propagate"`` lets non-finite states flow through so
    a filter can kill the particle via a zero potential.
    """
    x = np.asarray(x, dtype=float)
    return _euler_steps(spec, theta, grid.h, grid.steps, x, rng,
                        check=(on_divergence == "raise"))


class EulerHmmModel(FeynmanKacModel):
    """Level-l Euler HMM as a Feynman-Kac model.

    The initial law is one Euler interval started from the fixed point x0,
    so Feynman-Kac time t corresponds to the (t+1)-th observation.
    Diverged (non-finite) states are not an error here: the potential
    callable is expected to return -inf for them, killing the particle.
    """

    def __init__(self, spec: DiffusionSpec, theta, level: int, log_g, x0, n_steps: int):
        self.spec = spec
        self.theta = np.asarray(theta, dtype=float)
        self.grid = LevelGrid(level, spec.level_offset)
        self.log_g = log_g
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.n_steps = int(n_steps)
        self.state_dim = spec.dim

    def sample_initial(self, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        x = np.broadcast_to(self.x0, shape + (self.spec.dim,)).copy()
        return euler_transition(self.spec, self.theta, self.grid, x, rng,
                                on_divergence="propagate")

    def sample_step(self, t: int, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return euler_transition(self.spec, self.theta, self.grid, x_prev, rng,
                                on_divergence="propagate")

    def log_potential(self, t: int, x: np.ndarray, history=None) -> np.ndarray:
        return self.log_g(t, x)


def coupled_euler_transition(spec: DiffusionSpec, theta, grid_fine: LevelGrid,
                             x_fine: np.ndarray, x_coarse: np.ndarray,
                             rng: np.random.Generator,
                             on_divergence: str = "raise") -> tuple[np.ndarray, np.ndarray]:
    """Advance the (level l, level l-1) pair on shared Brownian increments.

    The fine chain takes K steps of size h; the coarse chain takes K/2 steps
    of size 2h, each driven by the sum of two consecutive fine increments
    (drawn once, never re-drawn).  Marginally each output has exactly the
    law of :func:`euler_transition` at its own level.
    """
    if grid_fine.level < 1:
        raise ValueError("coupled transition needs level >= 1 (no coarser level below 0)")
    xf = np.asarray(x_fine, dtype=float)
    xc = np.asarray(x_coarse, dtype=float)
    h = grid_fine.h
    check = on_divergence == "raise"
    step_f = spec.make_stepper(theta, h)
    step_c = spec.make_stepper(theta, 2.0 * h)
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    noise_shape = (2,) + xf.shape[:-1] + (spec.noise_dim,)
    for j in range(grid_fine.steps // 2):
        xi = rng.standard_normal(noise_shape)
        xf = step_f(step_f(xf, xi[0]), xi[1])
        # sqrt(2h) * (xi1 + xi2)/sqrt(2) == sqrt(h) xi1 + sqrt(h) xi2
        xc = step_c(xc, (xi[0] + xi[1]) * inv_sqrt2)
        if check:
            if not np.all(np.isfinite(xf)):
                raise DivergedPathError(2 * j + 1, leg="fine") from None
            if not np.all(np.isfinite(xc)):
                raise DivergedPathError(j, leg="coarse") from None
    return xf, xc
