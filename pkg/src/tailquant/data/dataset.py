"""Columnar sample collections, normalization, splitting and oversampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURES_1D = ("dhw", "thw", "ttc", "v_follow", "v_lead")
FEATURES_2D = FEATURES_1D + ("lanes_left", "lanes_right")
ACTIONS_1D = ("ax",)
ACTIONS_2D = ("ax", "ay")


class DataError(ValueError):
    """Raised for malformed or degenerate input data."""


@dataclass
class Samples:
    """State-action pairs stored column-wise.

    ``states`` has shape ``(n, n_features)`` and ``actions`` ``(n, dims)``.
    """

    states: np.ndarray
    actions: np.ndarray
    feature_names: tuple = None
    action_names: tuple = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.feature_names is None:
            wide = self.states.ndim == 2 and self.states.shape[1] == len(FEATURES_2D)
            self.feature_names = FEATURES_2D if wide else FEATURES_1D
        if self.action_names is None:
            wide = self.actions.ndim == 2 and self.actions.shape[1] == 2
            self.action_names = ACTIONS_2D if wide else ACTIONS_1D
        self.feature_names = tuple(self.feature_names)
        self.action_names = tuple(self.action_names)
        for name, arr, cols in (("states", self.states, self.feature_names),
                                ("actions", self.actions, self.action_names)):
            if arr.ndim == 2 and arr.shape[1] != len(cols):
                raise DataError(f"{name} have {arr.shape[1]} columns, expected {len(cols)}")
        self.states = self.states.reshape(-1, len(self.feature_names))
        self.actions = self.actions.reshape(-1, len(self.action_names))
        if len(self.states) != len(self.actions):
            raise DataError(f"{len(self.states)} states but {len(self.actions)} actions")

    def __len__(self):
        return len(self.states)

    @property
    def dims(self):
        return self.actions.shape[1]

    def subset(self, index):
        return Samples(self.states[index], self.actions[index], self.feature_names, self.action_names)

    def concat(self, other):
        return Samples(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            self.feature_names,
            self.action_names,
        )

    def rows(self):
        return np.concatenate([self.states, self.actions], axis=1)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.feature_names) + list(self.action_names))
            for row in self.rows():
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, dims=None):
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(x) for x in r] for r in reader if r]
        if dims is None:
            dims = 2 if "ay" in header else 1
        actions = header[-dims:]
        features = header[:-dims]
        arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
        return cls(arr[:, : len(features)], arr[:, len(features) :], tuple(features), tuple(actions))


@dataclass
class Normalizer:
    """Per-column affine standardization fitted on the training split."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def fit(cls, samples, feature_names=None):
        names = feature_names or samples.feature_names
        s_mean = samples.states.mean(axis=0)
        s_std = samples.states.std(axis=0)
        bad = [names[i] for i in np.flatnonzero(~(s_std > 0))]
        if bad:
            raise DataError(f"degenerate (zero-variance) features: {', '.join(bad)}")
        a_mean = samples.actions.mean(axis=0)
        a_std = samples.actions.std(axis=0)
        # constant actions keep a unit scale so they still standardize to zero
        a_std = np.where(a_std > 0, a_std, 1.0)
        return cls(s_mean, s_std, a_mean, a_std)

    @classmethod
    def identity(cls, n_features, dims=1):
        return cls(np.zeros(n_features), np.ones(n_features), np.zeros(dims), np.ones(dims))

    def states(self, s):
        return (np.asarray(s, dtype=float) - self.state_mean) / self.state_std

    def actions(self, a):
        return (np.asarray(a, dtype=float) - self.action_mean) / self.action_std

    def actions_inv(self, a, dim=None):
        a = np.asarray(a, dtype=float)
        if dim is None:
            return a * self.action_std + self.action_mean
        return a * self.action_std[dim] + self.action_mean[dim]

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in
                ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class DatasetSplit:
    train: Samples
    val: Samples
    test: Samples


def split_dataset(samples, ratios=(0.8, 0.1, 0.1), seed=0):
    """Shuffle by ``seed`` and cut into disjoint train/val/test parts."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    n_train = max(1, int(round(ratios[0] * n)))
    n_val = max(1, int(round(ratios[1] * n)))
    if n_train + n_val > n - 1:
        n_train = n - 1 - n_val
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        samples.subset(np.sort(perm[:n_train])),
        samples.subset(np.sort(perm[n_train : n_train + n_val])),
        samples.subset(np.sort(perm[n_train + n_val :])),
    )


def action_histogram(actions, bin_width):
    """Counts of the longitudinal action in bins ``[k*w, (k+1)*w)``; returns ``{k: count}``."""
    keys = np.floor(np.asarray(actions, dtype=float) / bin_width).astype(np.int64)
    uniq, counts = np.unique(keys, return_counts=True)
    return dict(zip(uniq.tolist(), counts.tolist()))


def oversample(train, bin_width=0.2, seed=0):
    """Duplicate random members of sparse action bins until every bin is as full as the fullest.

    Only the training split should be passed in. All originals are kept, in
    order, followed by the duplicates.

    Returns
    -------
    Samples, dict
        The rebalanced samples and a report with the pre/post histograms.
    """
    if not bin_width > 0:
        raise ValueError(f"bin width must be positive, got {bin_width}")
    a = train.actions[:, 0]
    keys = np.floor(a / bin_width).astype(np.int64)
    before = action_histogram(a, bin_width)
    target = max(before.values()) if before else 0
    rng = np.random.default_rng(seed)
    extra = []
    for k, count in sorted(before.items()):
        if count < target:
            members = np.flatnonzero(keys == k)
            extra.append(rng.choice(members, size=target - count, replace=True))
    index = np.concatenate([np.arange(len(train))] + extra) if extra else np.arange(len(train))
    out = train.subset(index)
    report = {
        "bin_width": bin_width,
        "target_count": int(target),
        "before": {str(k): v for k, v in before.items()},
        "after": {str(k): v for k, v in action_histogram(out.actions[:, 0], bin_width).items()},
        "duplicated": int(len(index) - len(train)),
    }
    return out, report
