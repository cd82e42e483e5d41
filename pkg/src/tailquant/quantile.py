"""Pinball loss, empirical quantiles and a brute-force loss minimizer."""

from __future__ import annotations

import math

import numpy as np

#: Evaluation levels of the quantile-loss tables.
LEVELS = (0.001, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 0.999)


def check_level(alpha):
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {alpha}")
    return alpha


def tal(a, a_pred, alpha):
    """Tilted absolute (pinball) loss ``max(alpha*r, (alpha-1)*r)`` with ``r = a - a_pred``."""
    alpha = check_level(alpha)
    a, a_pred = float(a), float(a_pred)
    if not (math.isfinite(a) and math.isfinite(a_pred)):
        raise ValueError("tal needs finite inputs")
    r = a - a_pred
    return max(alpha * r, (alpha - 1.0) * r)


def tal_array(a, a_pred, alpha):
    """Vectorized pinball loss; ``alpha`` may be a scalar or broadcastable array."""
    r = np.asarray(a, dtype=float) - np.asarray(a_pred, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return np.maximum(alpha * r, (alpha - 1.0) * r)


def mean_tal(actions, preds, alpha):
    """Mean pinball loss over paired actions and predictions."""
    alpha = check_level(alpha)
    actions = np.asarray(actions, dtype=float).ravel()
    preds = np.asarray(preds, dtype=float).ravel()
    if actions.size == 0:
        raise ValueError("mean_tal needs at least one pair")
    if actions.shape != preds.shape:
        raise ValueError(f"length mismatch: {actions.size} actions, {preds.size} predictions")
    if not (np.all(np.isfinite(actions)) and np.all(np.isfinite(preds))):
        raise ValueError("mean_tal needs finite inputs")
    return float(np.mean(tal_array(actions, preds, alpha)))


class EmpiricalDistribution:
    """Sorted one-dimensional sample with its step CDF."""

    def __init__(self, samples):
        x = np.sort(np.asarray(samples, dtype=float).ravel())
        if x.size == 0:
            raise ValueError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        self.samples = x

    def __len__(self):
        return self.samples.size

    def cdf(self, x):
        return np.searchsorted(self.samples, x, side="right") / self.samples.size

    def quantile(self, alpha):
        return empirical_quantile(self, alpha)


def _as_dist(dist):
    return dist if isinstance(dist, EmpiricalDistribution) else EmpiricalDistribution(dist)


def empirical_quantile(dist, alpha):
    """Lower inverse-CDF quantile: the smallest sample ``x`` with ``F(x) >= alpha``.

    No interpolation; ``alpha = 0`` returns the minimum.
    """
    alpha = check_level(alpha)
    x = _as_dist(dist).samples
    n = x.size
    ranks = np.arange(1, n + 1) / n
    return float(x[np.argmax(ranks >= alpha)])


def tal_minimizer_oracle(dist, alpha, grid_step):
    """Brute-force argmin of the mean pinball loss over a grid spanning the sample.

    The grid starts at the sample minimum and advances by ``grid_step`` until it
    covers the maximum. Ties (to relative precision 1e-12) go to the smallest
    grid point.
    """
    alpha = check_level(alpha)
    if not grid_step > 0:
        raise ValueError(f"grid_step must be positive, got {grid_step}")
    x = _as_dist(dist).samples
    lo, hi = x[0], x[-1]
    count = int(math.ceil((hi - lo) / grid_step)) + 1
    grid = lo + grid_step * np.arange(count)

    # mean loss at p = [alpha * sum_{x>p}(x-p) + (1-alpha) * sum_{x<=p}(p-x)] / n
    n = x.size
    csum = np.concatenate(([0.0], np.cumsum(x)))
    k = np.searchsorted(x, grid, side="right")
    below = k * grid - csum[k]
    above = (csum[n] - csum[k]) - (n - k) * grid
    obj = (alpha * above + (1.0 - alpha) * below) / n

    best = obj.min()
    tol = 1e-12 * max(1.0, abs(best), float(np.abs(x).max()))
    return float(grid[np.argmax(obj <= best + tol)])
