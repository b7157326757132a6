"""Feynman-Kac model interface and weighted-sample containers.

A Feynman-Kac model is a time horizon ``n_steps`` together with an initial
sampler, Markov transition samplers and nonnegative potential functions.
Filters in this package produce :class:`WeightedCloud` objects: possibly
signed weights attached to trajectories stored compactly as an
ancestor-index tree over per-time particle arrays.

All samplers receive an explicit ``numpy.random.Generator`` and are
vectorised over arbitrary leading axes (the filters exploit this to run
many independent replicates in lockstep).  Types are immutable after
construction and safe to share across threads and processes.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .util import signed_sum


class PhiEvaluationError(ValueError):
    """A path functional returned a non-finite value."""

    def __init__(self, index: int, value):
        self.index = index
        super().__init__(f"path functional returned non-finite value {value!r} "
                         f"for trajectory {index}")


class FeynmanKacModel(abc.ABC):
    """Time-0..n model: initial law, transition kernels and potentials.

    Potentials receive the current particle states ``x`` plus the growing
    ancestor tree (``history``), so path-dependent potentials are
    expressible; the bundled hidden-Markov models only use ``x``.
    """

    n_steps: int
    state_dim: int

    @abc.abstractmethod
    def sample_initial(self, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        """Draw initial states of shape ``shape + (state_dim,)``."""

    @abc.abstractmethod
    def sample_step(self, t: int, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw states at time ``t`` (1..n) given states at ``t-1``."""

    @abc.abstractmethod
    def log_potential(self, t: int, x: np.ndarray, history=None) -> np.ndarray:
        """log G_t at states ``x``; -inf kills a particle, never NaN."""


@dataclass(frozen=True)
class PathStore:
    """Ancestor-index tree: per-time states plus resampling indices.

    ``states[t]`` has shape (N, d); ``ancestors[t-1]`` maps a particle index
    at time t to its parent index at time t-1.  A trajectory is materialised
    on demand in O(n) instead of storing N full path copies.
    """

    states: list
    ancestors: list

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def materialize(self, terminal_index: int, cols: tuple | None = None) -> np.ndarray:
        """Trajectory ending at ``terminal_index``, shape (n+1, d)."""
        n = self.n_steps
        idx = int(terminal_index)
        d = self.states[0].shape[-1] if cols is None else cols[1] - cols[0]
        out = np.empty((n + 1, d))
        for t in range(n, -1, -1):
            row = self.states[t][idx]
            out[t] = row if cols is None else row[cols[0]:cols[1]]
            if t > 0:
                idx = int(self.ancestors[t - 1][idx])
        return out

    def materialize_all(self, cols: tuple | None = None) -> np.ndarray:
        """All trajectories at once, shape (N, n+1, d); vectorised backtrack."""
        n = self.n_steps
        n_particles = self.states[n].shape[0]
        idx = np.arange(n_particles)
        sel = slice(None) if cols is None else slice(cols[0], cols[1])
        rows = [self.states[n][:, sel]]
        for t in range(n, 0, -1):
            idx = np.asarray(self.ancestors[t - 1])[idx]
            rows.append(self.states[t - 1][idx][:, sel])
        return np.stack(rows[::-1], axis=1)


@dataclass(frozen=True)
class WeightedCloud:
    """Particle set (V^(i), X^(i)) with signed unnormalised-smoother weights.

    Weights are stored as log magnitude plus sign (running products of
    normalised potentials underflow quickly on linear scale); the exposed
    ``weights`` are plain reals.  Negative signs only occur in coupled-filter
    output.  ``components[i]`` optionally restricts trajectory ``i`` to a
    column range of the stored state (fine/coarse legs of a coupled run).
    """

    log_abs_weights: np.ndarray
    signs: np.ndarray
    store: PathStore
    terminal_indices: np.ndarray
    components: np.ndarray | None = None
    terminated: bool = False

    def __post_init__(self):
        if self.log_abs_weights.shape != self.signs.shape:
            raise ValueError("weight magnitude and sign arrays disagree in length")
        if self.log_abs_weights.shape != self.terminal_indices.shape:
            raise ValueError("weight and trajectory arrays disagree in length")

    @property
    def n_samples(self) -> int:
        return self.log_abs_weights.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Linear-scale signed weights V^(1:K)."""
        return self.signs * np.exp(self.log_abs_weights)

    def path(self, i: int) -> np.ndarray:
        cols = None if self.components is None else tuple(self.components[i])
        return self.store.materialize(self.terminal_indices[i], cols)

    def paths(self) -> np.ndarray:
        """Materialise every trajectory, shape (K, n+1, d)."""
        return np.stack([self.path(i) for i in range(self.n_samples)])

    def total_weight(self) -> float:
        """Sum of signed weights (the unnormalised-likelihood estimate)."""
        return float(signed_sum(self.log_abs_weights, self.signs))


def smoother_estimate(cloud: WeightedCloud, phi) -> float | np.ndarray:
    """Unnormalised-smoother estimate sum_i V^(i) phi(X^(i)).

    ``phi`` maps a materialised trajectory (n+1, d) to a float or 1-d
    vector.  Zero-weight entries are skipped, so terminated filters return
    exactly 0 for any ``phi`` (trajectories are arbitrary there).  A
    non-finite ``phi`` value on a live trajectory raises
    :class:`PhiEvaluationError` naming the offending index.
    """
    live = np.flatnonzero(cloud.signs != 0)
    if live.size == 0:
        return 0.0
    values = []
    for i in live:
        v = np.asarray(phi(cloud.path(i)), dtype=float)
        if not np.all(np.isfinite(v)):
            raise PhiEvaluationError(int(i), v)
        values.append(v)
    values = np.stack(values) if values[0].ndim else np.array(values)
    return signed_sum(cloud.log_abs_weights[live], cloud.signs[live], values)
