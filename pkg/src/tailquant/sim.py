"""One-dimensional car-following rollouts with a log-replayed leader."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .data.synthetic import TTC_CAP

TRACE_COLUMNS = ("time", "accel", "velocity", "dhw", "thw", "ttc")


@dataclass
class Scenario:
    """Leader trajectory sampled every ``dt`` seconds plus the follower's start."""

    leader_x: np.ndarray
    leader_v: np.ndarray
    follower_x0: float
    follower_v0: float
    length: float = 4.5
    dt: float = 0.04

    def __post_init__(self):
        self.leader_x = np.asarray(self.leader_x, dtype=float)
        self.leader_v = np.asarray(self.leader_v, dtype=float)
        if self.leader_x.shape != self.leader_v.shape or self.leader_x.ndim != 1:
            raise ValueError("leader position and velocity series must be 1-D and equally long")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        gap = self.leader_x[0] - self.follower_x0 - self.length
        if not gap > 0:
            raise ValueError(f"initial follower gap must be positive, got {gap}")

    def __len__(self):
        return len(self.leader_x)

    @classmethod
    def constant_speed(cls, steps, leader_x0, leader_v, follower_x0, follower_v0, **kw):
        dt = kw.get("dt", 0.04)
        t = np.arange(steps) * dt
        return cls(leader_x0 + leader_v * t, np.full(steps, float(leader_v)),
                   follower_x0, follower_v0, **kw)

    def to_dict(self):
        return {
            "leader_x": self.leader_x.tolist(),
            "leader_v": self.leader_v.tolist(),
            "follower_x0": self.follower_x0,
            "follower_v0": self.follower_v0,
            "length": self.length,
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RolloutTrace:
    time: list = field(default_factory=list)
    accel: list = field(default_factory=list)
    velocity: list = field(default_factory=list)
    dhw: list = field(default_factory=list)
    thw: list = field(default_factory=list)
    ttc: list = field(default_factory=list)
    leader_x: list = field(default_factory=list)
    follower_x: list = field(default_factory=list)
    terminal: str = "completed"

    def __len__(self):
        return len(self.time)

    def rows(self):
        return list(zip(*(getattr(self, c) for c in TRACE_COLUMNS)))

    @property
    def collided(self):
        return self.terminal == "collision"


def kinematic_step(x, v, accel, dt):
    """Semi-implicit Euler with no reversing: ``v' = max(0, v + a dt)``, ``x' = x + v' dt``."""
    v_next = max(0.0, v + accel * dt)
    return x + v_next * dt, v_next


def recompute_features(leader_x, leader_v, follower_x, follower_v, length=4.5, cap=TTC_CAP):
    """``(dhw, thw, ttc, v_follow, v_lead)`` from the two vehicle states."""
    dhw = leader_x - follower_x - length
    thw = min(dhw / follower_v, cap) if follower_v > 0 else cap
    closing = follower_v - leader_v
    ttc = min(dhw / closing, cap) if closing > 0 else cap
    return np.array([dhw, thw, ttc, follower_v, leader_v])


def _policy(model):
    n = getattr(model, "n_features", None)
    if n is not None and n != 5:
        raise ShapeError(f"rollouts use 5 state features, model expects {n}")
    if hasattr(model, "quantile"):
        return lambda s, a: model.quantile(s, a)
    if callable(model):
        return model
    raise TypeError("model must provide quantile(state, alpha) or be callable")


def rollout(model, alpha, scenario, horizon=None, seed=None):
    """Drive the follower with the model's alpha-quantile acceleration at every step.

    With ``seed`` set, each step instead draws a fresh level uniformly from
    (0, 1), which samples the model's conditional distribution.

    The trace stops at ``horizon`` steps or just before the first step whose
    gap is nonpositive, in which case ``terminal == "collision"``.
    """
    policy = _policy(model)
    horizon = len(scenario) if horizon is None else int(horizon)
    if horizon > len(scenario):
        raise ValueError(f"horizon {horizon} exceeds the leader log ({len(scenario)} steps)")
    rng = np.random.default_rng(seed) if seed is not None else None
    trace = RolloutTrace()
    x, v = float(scenario.follower_x0), float(scenario.follower_v0)
    for k in range(horizon):
        xl, vl = scenario.leader_x[k], scenario.leader_v[k]
        feats = recompute_features(xl, vl, x, v, scenario.length)
        if feats[0] <= 0:
            trace.terminal = "collision"
            break
        level = alpha if rng is None else float(rng.uniform(1e-6, 1.0 - 1e-6))
        accel = float(np.asarray(policy(feats, level)).reshape(-1)[0])
        if not math.isfinite(accel):
            raise FloatingPointError(f"non-finite acceleration at step {k}")
        trace.time.append(k * scenario.dt)
        trace.accel.append(accel)
        trace.velocity.append(v)
        trace.dhw.append(float(feats[0]))
        trace.thw.append(float(feats[1]))
        trace.ttc.append(float(feats[2]))
        trace.leader_x.append(float(xl))
        trace.follower_x.append(x)
        x, v = kinematic_step(x, v, accel, scenario.dt)
    return trace
