"""Mini-batch Adam loop shared by every trainable model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..autodiff import Adam, NonFiniteGradientError, backward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 20
    # multiplicative learning-rate decay applied after each epoch
    lr_decay: float = 1.0
    # restore the parameters of the epoch with the lowest validation loss
    keep_best: bool = True
    hidden: tuple = (64, 64, 64, 64)
    conditioner_hidden: tuple = (64, 64)
    stack_depth: int = 3
    mc_draws: int = 1
    # share of quantile-flow training levels drawn with extra tail mass
    tail_mix: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.conditioner_hidden = tuple(self.conditioner_hidden)
        for name in ("batch_size", "epochs", "stack_depth", "mc_draws"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.tail_mix <= 1.0:
            raise ValueError("tail_mix must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["conditioner_hidden"] = list(self.conditioner_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def fit(params, batch_loss, n, config, rng, val_loss=None, monitor=None):
    """Minimize ``batch_loss`` over shuffled mini-batches.

    Parameters
    ----------
    params : list of Node
    batch_loss : callable
        ``batch_loss(index, rng) -> Node`` for an integer index array.
    n : int
        Number of training rows.
    val_loss : callable, optional
        ``val_loss() -> float`` evaluated after every epoch.
    monitor : callable, optional
        Called as ``monitor(epoch)`` after every epoch; may raise.

    Returns
    -------
    list of dict
        One entry per epoch (``epoch``, ``train_loss``, ``val_loss``).
    """
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    history = []
    best = (math.inf, None)
    bs = int(config.batch_size)
    for epoch in range(1, int(config.epochs) + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            loss = batch_loss(idx, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch)
            grads = backward(loss)
            try:
                opt.step([grads.get(p, np.zeros_like(p.value)) for p in params])
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}", epoch) from exc
            total += value * len(idx)
        entry = {"epoch": epoch, "train_loss": total / n, "val_loss": None}
        if val_loss is not None:
            v = float(val_loss())
            if not math.isfinite(v):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", epoch)
            entry["val_loss"] = v
            if config.keep_best and v < best[0]:
                best = (v, [p.value.copy() for p in params])
        if monitor is not None:
            monitor(epoch)
        history.append(entry)
        log.debug("epoch %d train %.6g val %s", epoch, entry["train_loss"], entry["val_loss"])
        opt.lr *= config.lr_decay
    if best[1] is not None:
        for p, value in zip(params, best[1]):
            p.value = value
    return history
