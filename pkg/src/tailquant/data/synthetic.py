"""Synthetic car-following data with analytically known conditional quantiles.

Actions are ``mu(s) + sigma(s) * eta`` where ``mu`` is an intelligent-driver-model
acceleration with a smooth floor, ``sigma(s) = 0.15 + 0.5 / (1 + thw)`` and
``eta ~ 0.9 N(0, 1) + 0.1 N(0, 9)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .dataset import FEATURES_1D, Samples

TTC_CAP = 50.0


@dataclass(frozen=True)
class SyntheticSpec:
    a_max: float = 2.0
    comfortable_decel: float = 2.0
    desired_speed: float = 33.0
    jam_distance: float = 2.0
    desired_headway: float = 1.2
    exponent: float = 4.0
    # smooth floor of the mean acceleration, m/s^2
    decel_floor: float = 4.0
    noise_base: float = 0.15
    noise_gain: float = 0.5
    mix_weight: float = 0.1
    mix_scale: float = 3.0
    dhw_range: tuple = (5.0, 120.0)
    speed_range: tuple = (15.0, 35.0)
    lead_speed_range: tuple = (15.0, 35.0)
    # multiplies sigma; 0 makes the generator deterministic
    noise_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")


def _cols(states):
    s = np.atleast_2d(np.asarray(states, dtype=float))
    return s[:, 0], s[:, 1], s[:, 3], s[:, 4]


def mean_accel(spec, states):
    """Floored IDM acceleration for rows ``(dhw, thw, ttc, v, v_lead, ...)``."""
    dhw, _, v, v_lead = _cols(states)
    s_star = (
        spec.jam_distance
        + v * spec.desired_headway
        + v * (v - v_lead) / (2.0 * np.sqrt(spec.a_max * spec.comfortable_decel))
    )
    s_star = np.maximum(s_star, 0.0)
    idm = spec.a_max * (1.0 - (v / spec.desired_speed) ** spec.exponent - (s_star / dhw) ** 2)
    floor = spec.decel_floor
    return np.where(idm < 0.0, floor * np.tanh(idm / floor), idm)


def noise_scale(spec, states):
    _, thw, _, _ = _cols(states)
    return spec.noise_factor * (spec.noise_base + spec.noise_gain / (1.0 + thw))


def mixture_cdf(spec, x):
    x = np.asarray(x, dtype=float)
    w = spec.mix_weight
    return (1.0 - w) * ndtr(x) + w * ndtr(x / spec.mix_scale)


def mixture_ppf(spec, alpha, tol=1e-10):
    """Inverse mixture CDF by bisection, to absolute tolerance ``tol``.

    Solved on the upper half only and reflected, so ``ppf(0.5) == 0`` and
    ``ppf(a) == -ppf(1 - a)`` hold exactly.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha <= 0.0) | (alpha >= 1.0)):
        raise ValueError("mixture quantiles need alpha strictly inside (0, 1)")
    upper = np.maximum(alpha, 1.0 - alpha)
    lo = np.zeros(alpha.shape)
    hi = np.ones(alpha.shape)
    while np.any(mixture_cdf(spec, hi) < upper):
        hi = np.where(mixture_cdf(spec, hi) < upper, 2.0 * hi, hi)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        left = mixture_cdf(spec, mid) < upper
        lo = np.where(left, mid, lo)
        hi = np.where(left, hi, mid)
    out = np.where(upper == 0.5, 0.0, 0.5 * (lo + hi))
    out = np.where(alpha < 0.5, -out, out)
    return float(out) if out.ndim == 0 else out


def sample_mixture(spec, n, rng):
    wide = rng.random(n) < spec.mix_weight
    eta = rng.standard_normal(n)
    return np.where(wide, spec.mix_scale * eta, eta)


def derive_features(dhw, v, v_lead, cap=TTC_CAP):
    """Stack ``(dhw, thw, ttc, v, v_lead)`` with capped time headway and ttc."""
    dhw = np.asarray(dhw, dtype=float)
    v = np.asarray(v, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        thw = np.where(v > 0.0, dhw / v, cap)
        closing = v - v_lead
        ttc = np.where(closing > 0.0, dhw / closing, cap)
    thw = np.minimum(thw, cap)
    ttc = np.minimum(ttc, cap)
    return np.stack([dhw, thw, ttc, v, v_lead], axis=-1)


def sample_states(spec, n, rng):
    dhw = rng.uniform(*spec.dhw_range, n)
    v = rng.uniform(*spec.speed_range, n)
    v_lead = rng.uniform(*spec.lead_speed_range, n)
    return derive_features(dhw, v, v_lead)


def synth_generate(spec, n, seed):
    """Draw ``n`` state-action pairs; reproducible by ``seed``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    states = sample_states(spec, n, rng)
    eta = sample_mixture(spec, n, rng)
    actions = mean_accel(spec, states) + noise_scale(spec, states) * eta
    return Samples(states, actions[:, None], FEATURES_1D, ("ax",))


def synth_true_quantile(spec, states, alpha):
    """Analytic conditional alpha-quantile of the generator at ``states``."""
    q = mean_accel(spec, states) + noise_scale(spec, states) * mixture_ppf(spec, alpha)
    return float(q[0]) if np.ndim(states) == 1 else q
