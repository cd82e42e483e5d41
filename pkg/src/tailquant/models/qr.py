"""Per-level neural quantile regression."""

from __future__ import annotations

import numpy as np

from ..autodiff import DenseNet, ShapeError, constant
from ..data.dataset import Normalizer
from ..quantile import check_level
from .training import TrainConfig, fit

FORMAT_VERSION = 1


def pinball(y, pred, alpha):
    """Mean pinball loss as a graph node; ``alpha`` may be an array."""
    r = y - pred
    return (r.relu() * alpha + (-r).relu() * (1.0 - alpha)).mean()


class QuantileRegressor:
    """A network predicting one conditional quantile of the longitudinal action."""

    def __init__(self, alpha, net, normalizer):
        self.alpha = check_level(alpha)
        self.net = net
        self.normalizer = normalizer

    @property
    def n_features(self):
        return self.net.n_in

    def predict(self, states):
        """De-standardized alpha-quantile for one state vector or a batch."""
        s = np.asarray(states, dtype=float)
        if s.shape[-1:] != (self.n_features,):
            raise ShapeError(f"model expects {self.n_features} features, got shape {s.shape}")
        out = self.net.predict(self.normalizer.states(s))[..., 0]
        return self.normalizer.actions_inv(out, dim=0)

    def quantile(self, states, alpha, dim=0, prefix=None):
        if dim != 0:
            raise ValueError("quantile regression models only the longitudinal action")
        if check_level(alpha) != self.alpha:
            raise KeyError(f"no quantile regressor for level {alpha}")
        return self.predict(states)

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "model": "qr",
            "alpha": self.alpha,
            "net": self.net.to_dict(),
            "normalizer": self.normalizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model") != "qr":
            raise ValueError("not a quantile-regression checkpoint")
        return cls(d["alpha"], DenseNet.from_dict(d["net"]), Normalizer.from_dict(d["normalizer"]))


class QuantileRegressorSet:
    """One regressor per level behind a single ``quantile`` call."""

    def __init__(self, models):
        self.models = {m.alpha: m for m in models}

    @property
    def levels(self):
        return tuple(sorted(self.models))

    @property
    def n_features(self):
        return next(iter(self.models.values())).n_features

    def __getitem__(self, alpha):
        try:
            return self.models[float(alpha)]
        except KeyError:
            raise KeyError(f"no quantile regressor trained for level {alpha}") from None

    def quantile(self, states, alpha, dim=0, prefix=None):
        return self[alpha].quantile(states, alpha, dim)


def train_qr(train, alpha, config=None, seed=0, val=None, normalizer=None):
    """Fit one regressor for ``alpha`` by mini-batch Adam on the pinball loss.

    Returns
    -------
    QuantileRegressor, list of dict
        The model and its per-epoch loss history.
    """
    alpha = check_level(alpha)
    config = config or TrainConfig()
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    normalizer = normalizer or Normalizer.fit(train)
    x = normalizer.states(train.states)
    y = normalizer.actions(train.actions)[:, :1]
    net = DenseNet((x.shape[1], *config.hidden, 1), rng)

    def batch_loss(idx, _rng):
        return pinball(constant(y[idx]), net(x[idx]), alpha)

    val_loss = None
    if val is not None and len(val):
        xv = normalizer.states(val.states)
        yv = normalizer.actions(val.actions)[:, :1]

        def val_loss():
            r = yv - net.predict(xv)
            return float(np.mean(np.maximum(alpha * r, (alpha - 1.0) * r)))

    history = fit(net.parameters, batch_loss, len(train), config, rng, val_loss)
    return QuantileRegressor(alpha, net, normalizer), history
