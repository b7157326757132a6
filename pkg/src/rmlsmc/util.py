"""Shared numerics and RNG-stream helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*path) -> tuple:
    """Canonical integer key for an RNG stream path (strings hashed stably)."""
    keys = []
    for part in path:
        if isinstance(part, (tuple, list)):
            keys.extend(stream_key(*part))
        elif isinstance(part, str):
            digest = hashlib.sha256(part.encode()).digest()
            keys.append(int.from_bytes(digest[:4], "little"))
        else:
            keys.append(int(part))
    return tuple(keys)


def stream(*path) -> np.random.Generator:
    """Dedicated RNG stream for a task identified by ``path``.

    Stream identity depends only on the path (seed first, by convention),
    never on scheduling, so results are reproducible for any worker count.
    Components may be ints, strings (hashed stably, not via ``hash()``) or
    nested tuples.
    """
    if not path:
        raise ValueError("stream path must be nonempty")
    return np.random.default_rng(np.random.SeedSequence(stream_key(*path)))


def logsumexp_rows(lw: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp along the last axis; all -inf rows give -inf."""
    m = np.max(lw, axis=-1)
    finite = np.isfinite(m)
    if np.all(finite):
        return m + np.log(np.sum(np.exp(lw - m[..., None]), axis=-1))
    out = np.full(m.shape, -np.inf)
    if np.any(finite):
        sub = lw[finite]
        msub = m[finite]
        out[finite] = msub + np.log(np.sum(np.exp(sub - msub[..., None]), axis=-1))
    return out


def signed_sum(log_abs: np.ndarray, signs: np.ndarray, values: np.ndarray | None = None):
    """Stable sum of sign*exp(log_abs)*value over the last axis.

    Factoring out the max log magnitude keeps the result meaningful when all
    magnitudes are far below the float range; positive and negative parts
    are summed separately, so clouds whose halves carry identical magnitudes
    (a perfectly coupled filter) cancel to exactly zero.
    """
    log_abs = np.asarray(log_abs, dtype=float)
    signs = np.asarray(signs)
    live = signs != 0
    if not np.any(live):
        if values is not None and np.ndim(values) > np.ndim(log_abs):
            return np.zeros(np.asarray(values).shape[-1])
        return 0.0
    m = np.max(log_abs[live])
    scaled = np.where(live, np.exp(log_abs - m), 0.0)

    def part(mask):
        sel = scaled[mask]
        if values is None:
            return np.sum(sel)
        vals = np.asarray(values, dtype=float)[mask]
        if vals.ndim == sel.ndim:
            return np.sum(sel * vals)
        return np.tensordot(sel, vals, axes=([0], [0]))

    return np.exp(m) * (part(signs > 0) - part(signs < 0))


def fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares line fit returning (slope, intercept, slope standard error)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two points to fit a slope")
    xm = x - x.mean()
    sxx = float(np.sum(xm * xm))
    slope = float(np.sum(xm * y) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    if n > 2:
        resid = y - (intercept + slope * x)
        s2 = float(np.sum(resid * resid) / (n - 2))
        se = np.sqrt(s2 / sxx)
    else:
        se = np.nan
    return slope, intercept, float(se)


def batch_means_se(samples: np.ndarray, n_batches: int = 20) -> float:
    """Batch-means standard error of the mean of a correlated sequence."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    n_batches = min(n_batches, n)
    if n_batches < 2:
        return float("nan")
    width = n // n_batches
    trimmed = samples[: width * n_batches].reshape(n_batches, width)
    means = trimmed.mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))
