"""Bootstrap particle filter with unbiased unnormalised-smoother weights.

The filter resamples every step (no ESS gating): the unbiasedness contract
sum_i V^(i) phi(X^(i)) ~ gamma_n(G_n phi) relies on it.  The running factor
prod_t omega*_t / N is accumulated in log space; a step with omega* = 0
terminates that run (all weights zero, trajectories arbitrary), which is a
valid output, not an error.

The core loop operates on a batch of B independent runs at once (states of
shape (B, N, d)), so replicate studies vectorise across runs.  Per-run
resampling uses O(N) inverse-CDF passes for every scheme; multinomial draws
sorted uniforms from exponential spacings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fk import FeynmanKacModel, PathStore, WeightedCloud
from .util import logsumexp_rows

RESAMPLING_SCHEMES = ("multinomial", "systematic", "stratified")


class ResamplingError(ValueError):
    """Resampling weight contract violated (negative or unnormalised)."""


def _inverse_cdf_rows(wbar: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF of ``wbar`` at sorted ``points`` in [0, 1)."""
    n_rows, n = wbar.shape
    cum = np.cumsum(wbar, axis=1)
    cum /= cum[:, -1:]
    offsets = np.arange(n_rows)[:, None].astype(float)
    flat_cum = (cum + offsets).ravel()
    flat_pts = (points + offsets).ravel()
    idx = np.searchsorted(flat_cum, flat_pts, side="right")
    idx = idx.reshape(n_rows, n) - np.arange(n_rows)[:, None] * n
    return np.clip(idx, 0, n - 1)


def _resample_rows(wbar: np.ndarray, scheme: str, rng: np.random.Generator) -> np.ndarray:
    b, n = wbar.shape
    if scheme == "multinomial":
        # Sorted uniforms from normalised exponential spacings: O(N) per row.
        e = rng.standard_exponential((b, n + 1))
        s = np.cumsum(e, axis=1)
        points = s[:, :-1] / s[:, -1:]
    elif scheme == "systematic":
        u = rng.random((b, 1))
        points = (u + np.arange(n)) / n
    elif scheme == "stratified":
        points = (rng.random((b, n)) + np.arange(n)) / n
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return _inverse_cdf_rows(wbar, points)


def resample(weights: np.ndarray, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices A^(1:N) with E[#{A = k}] = N * w[k].

    ``weights`` must be nonnegative and sum to one (tolerance 1e-12).
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ResamplingError("negative resampling weight")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ResamplingError(f"weights sum to {w.sum()!r}, expected 1")
    if scheme not in RESAMPLING_SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return _resample_rows(w[None, :], scheme, rng)[0]


@dataclass(frozen=True)
class FilterBatch:
    """Output of B lockstep particle filter runs with N particles each.

    ``log_prod`` holds log prod_t omega*_t/N per run; ``log_wbar`` the final
    normalised log weights.  For coupled models ``log_wf``/``log_wc`` carry
    the accumulated fine/coarse weight-correction logs along each surviving
    lineage.
    """

    log_prod: np.ndarray
    log_wbar: np.ndarray
    states: list
    ancestors: list
    terminated: np.ndarray
    log_wf: np.ndarray | None = None
    log_wc: np.ndarray | None = None

    @property
    def n_runs(self) -> int:
        return self.log_prod.shape[0]

    @property
    def n_particles(self) -> int:
        return self.log_wbar.shape[1]

    def log_sum_v(self) -> np.ndarray:
        """log sum_i V^(i) per run (-inf for terminated runs)."""
        return self.log_prod.copy()

    def particle_log_v(self) -> np.ndarray:
        """(B, N) log V^(i); -inf where a run terminated."""
        out = self.log_wbar + self.log_prod[:, None]
        return np.where(self.terminated[:, None], -np.inf, out)

    def materialize_paths(self, cols: tuple | None = None) -> np.ndarray:
        """All trajectories of all runs, shape (B, N, n+1, d_sel)."""
        n = len(self.states) - 1
        b, n_particles = self.log_wbar.shape
        sel = slice(None) if cols is None else slice(cols[0], cols[1])
        idx = np.broadcast_to(np.arange(n_particles), (b, n_particles)).copy()
        rows = [self.states[n][:, :, sel]]
        for t in range(n, 0, -1):
            idx = np.take_along_axis(self.ancestors[t - 1], idx, axis=1)
            rows.append(np.take_along_axis(
                self.states[t - 1][:, :, sel], idx[:, :, None], axis=1))
        return np.stack(rows[::-1], axis=2)


class _History:
    """Read-only view of the particle tree built so far (for path-dependent
    potentials; the bundled models ignore it)."""

    def __init__(self, states, ancestors):
        self.states = states
        self.ancestors = ancestors


def run_filter_batch(model: FeynmanKacModel, n_particles: int, n_runs: int,
                     rng: np.random.Generator, scheme: str = "multinomial") -> FilterBatch:
    """Run ``n_runs`` independent N-particle filters in lockstep."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if scheme not in RESAMPLING_SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    b, n_p = n_runs, n_particles
    coupled = hasattr(model, "log_potential_pair")
    log_n = np.log(n_p)

    x = model.sample_initial((b, n_p), rng)
    states = [x]
    ancestors = []
    history = _History(states, ancestors)
    log_prod = np.zeros(b)
    terminated = np.zeros(b, dtype=bool)
    log_wf = np.zeros((b, n_p)) if coupled else None
    log_wc = np.zeros((b, n_p)) if coupled else None

    def potentials(t, x):
        if coupled:
            lg_f, lg_c = model.log_potential_pair(t, x, history)
            lg = model.combine_log_potentials(lg_f, lg_c)
            with np.errstate(invalid="ignore"):
                d_f = np.where(np.isneginf(lg_f), -np.inf, lg_f - lg)
                d_c = np.where(np.isneginf(lg_c), -np.inf, lg_c - lg)
            return lg, d_f, d_c
        lg = model.log_potential(t, x, history)
        return lg, None, None

    lg, d_f, d_c = potentials(0, x)
    lg = np.where(np.isnan(lg), -np.inf, lg)
    if coupled:
        log_wf += d_f
        log_wc += d_c

    for t in range(1, model.n_steps + 1):
        lse = logsumexp_rows(lg)
        terminated |= np.isneginf(lse)
        log_prod += lse - log_n
        with np.errstate(invalid="ignore"):
            wbar = np.where(terminated[:, None], 1.0 / n_p, np.exp(lg - lse[:, None]))
        anc = _resample_rows(wbar, scheme, rng)
        ancestors.append(anc)
        x = np.take_along_axis(x, anc[:, :, None], axis=1)
        if coupled:
            log_wf = np.take_along_axis(log_wf, anc, axis=1)
            log_wc = np.take_along_axis(log_wc, anc, axis=1)
        x = model.sample_step(t, x, rng)
        states.append(x)
        lg, d_f, d_c = potentials(t, x)
        lg = np.where(np.isnan(lg), -np.inf, lg)
        if coupled:
            log_wf = log_wf + d_f
            log_wc = log_wc + d_c

    lse = logsumexp_rows(lg)
    terminated |= np.isneginf(lse)
    log_prod += lse - log_n
    log_prod = np.where(terminated, -np.inf, log_prod)
    with np.errstate(invalid="ignore"):
        log_wbar = np.where(terminated[:, None], -np.inf, lg - lse[:, None])
    return FilterBatch(log_prod=log_prod, log_wbar=log_wbar, states=states,
                       ancestors=ancestors, terminated=terminated,
                       log_wf=log_wf, log_wc=log_wc)


def pf_batch_estimates(batch: FilterBatch, phi=None) -> np.ndarray:
    """sum_i V^(i) phi(X^(i)) per run, for a batch of plain filter runs.

    ``phi=None`` means phi == 1 (the unnormalised-likelihood estimate);
    otherwise ``phi`` maps materialised paths (B, N, n+1, d) to (B, N).
    """
    log_v = batch.particle_log_v()
    if phi is None:
        return np.exp(batch.log_sum_v())
    values = phi(batch.materialize_paths())
    m = np.max(log_v, axis=1)
    out = np.zeros(batch.n_runs)
    live = np.isfinite(m)
    if np.any(live):
        out[live] = np.exp(m[live]) * np.sum(
            np.exp(log_v[live] - m[live, None]) * values[live], axis=1)
    return out


def _single_run_store(batch: FilterBatch) -> PathStore:
    return PathStore(states=[s[0] for s in batch.states],
                     ancestors=[a[0] for a in batch.ancestors])


def run_pf(model: FeynmanKacModel, n_particles: int, rng: np.random.Generator,
           scheme: str = "multinomial") -> WeightedCloud:
    """Particle filter returning (V^(1:N), X^(1:N)).

    V^(i) = wbar_n^(i) prod_t omega*_t/N; expectation of
    sum_i V^(i) phi(X^(i)) over filter randomness is gamma_n(G_n phi).
    """
    batch = run_filter_batch(model, n_particles, 1, rng, scheme)
    log_abs = batch.particle_log_v()[0]
    signs = np.where(np.isfinite(log_abs), 1, 0).astype(np.int8)
    return WeightedCloud(
        log_abs_weights=np.where(signs == 0, -np.inf, log_abs),
        signs=signs,
        store=_single_run_store(batch),
        terminal_indices=np.arange(n_particles),
        terminated=bool(batch.terminated[0]),
    )
