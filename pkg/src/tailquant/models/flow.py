"""Conditional autoregressive flows over one or two action dimensions.

Dimension ``j`` is produced by a stack of monotone transformers applied to the
base variable ``z_j``; every transformer's conditioner sees the standardized
state features and the already-known actions ``a_<j``. With a uniform base on
[0, 1] (quantile flow), ``z_j = alpha`` gives the conditional alpha-quantile;
with a standard-normal base (likelihood flow) it is ``z_j = probit(alpha)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, ndtri

from ..autodiff import ShapeError, concat, constant
from ..data.dataset import Normalizer
from ..quantile import LEVELS
from .coupling import TRANSFORMERS
from .qr import pinball
from .training import TrainConfig, fit

FORMAT_VERSION = 1
KINDS = ("aqf-affine", "aqf-nlsq", "anf-affine", "anf-nlsq")
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def parse_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown flow kind {kind!r}; expected one of {', '.join(KINDS)}")
    family, coupling = kind.split("-")
    return ("uniform" if family == "aqf" else "normal"), coupling


class ConditionalFlow:
    """Autoregressive flow ``a_j = tau_M(...tau_1(z_j))`` conditioned on ``(g(s), a_<j)``.

    Parameters
    ----------
    n_features : int
        Width of the state feature vector.
    dims : int
        Number of action dimensions (1: longitudinal; 2: plus lateral).
    coupling : {"affine", "nlsq"}
    base : {"uniform", "normal"}
    stack_depth : int
        Transformers per dimension.
    hidden : tuple of int
        Hidden widths of every conditioner network.
    """

    def __init__(self, n_features, dims=1, coupling="nlsq", base="uniform", stack_depth=3,
                 hidden=(64, 64), rng=None, normalizer=None, action_names=None):
        if dims not in (1, 2):
            raise ValueError(f"dims must be 1 or 2, got {dims}")
        if base not in ("uniform", "normal"):
            raise ValueError(f"unknown base distribution {base!r}")
        if coupling not in TRANSFORMERS:
            raise ValueError(f"unknown coupling {coupling!r}")
        rng = np.random.default_rng(rng)
        self.n_features = int(n_features)
        self.dims = dims
        self.coupling = coupling
        self.base = base
        self.stack_depth = int(stack_depth)
        self.hidden = tuple(hidden)
        self.normalizer = normalizer or Normalizer.identity(self.n_features, dims)
        self.action_names = tuple(action_names or ("ax", "ay")[:dims])
        cls = TRANSFORMERS[coupling]
        self.stacks = [
            [cls(self.n_features + j, self.hidden, rng) for _ in range(self.stack_depth)]
            for j in range(dims)
        ]
        if base == "uniform":
            # first layer spreads [0, 1] over roughly [-2, 2] in standardized units
            for stack in self.stacks:
                bias = stack[0].net.biases[-1].value.copy()
                bias[0], bias[1] = -2.0, math.log(4.0)
                stack[0].net.biases[-1].value = bias

    @property
    def kind(self):
        return f"{'aqf' if self.base == 'uniform' else 'anf'}-{self.coupling}"

    @property
    def parameters(self):
        return [p for stack in self.stacks for t in stack for p in t.parameters]

    def transformers(self):
        for stack in self.stacks:
            yield from stack

    # -- internal, standardized space -------------------------------------

    def _ctx(self, s, prefix, j):
        """Conditioner input: standardized state plus the first ``j`` actions."""
        if hasattr(s, "value"):
            return s if j == 0 else concat([s, constant(prefix[:, :j])], axis=1)
        return s if j == 0 else np.concatenate([s, prefix[:, :j]], axis=1)

    def _forward_dim(self, j, z, ctx):
        y = z
        for t in self.stacks[j]:
            y = t.forward(y, ctx)
        return y

    def _inverse_dim(self, j, y, ctx):
        """Numpy inverse; returns ``z`` and ``sum log tau'`` along the path."""
        log_slope = np.zeros(np.shape(y))
        for t in reversed(self.stacks[j]):
            y = t.inverse(y, ctx)
            log_slope = log_slope + np.log(t.derivative(y, ctx))
        return y, log_slope

    def _inverse_dim_node(self, j, y, ctx):
        log_slope = 0.0
        for t in reversed(self.stacks[j]):
            y = t.inverse_node(y, ctx)
            log_slope = t.derivative(y, ctx).log() + log_slope
        return y, log_slope

    def _base_value(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if self.base == "uniform":
            return alpha
        if np.any((alpha <= 0.0) | (alpha >= 1.0)):
            raise ValueError("normal-base flows need quantile levels strictly inside (0, 1)")
        return ndtri(alpha)

    def _states(self, states):
        s = np.atleast_2d(np.asarray(states, dtype=float))
        if s.shape[1] != self.n_features:
            raise ShapeError(f"flow expects {self.n_features} features, got shape {s.shape}")
        return self.normalizer.states(s)

    # -- public, raw units ------------------------------------------------

    def generate(self, states, z):
        """Map base draws ``z`` (shape ``(n, dims)``) to actions, dimension by dimension."""
        s = self._states(states)
        z = np.asarray(z, dtype=float).reshape(len(s), self.dims)
        if self.base == "uniform" and np.any((z < 0.0) | (z > 1.0)):
            raise ValueError("uniform-base draws must lie in [0, 1]")
        out = np.empty_like(z)
        for j in range(self.dims):
            out[:, j] = self._forward_dim(j, z[:, j], self._ctx(s, out, j))
        return self.normalizer.actions_inv(out)

    def sample(self, states, rng):
        n = len(np.atleast_2d(states))
        draw = rng.random((n, self.dims)) if self.base == "uniform" else rng.standard_normal((n, self.dims))
        return self.generate(states, draw)

    def quantile(self, states, alpha, dim=0, prefix=None):
        """Conditional alpha-quantile of action ``dim`` given the state and observed ``a_<dim``.

        ``alpha`` may be a scalar or one level per state row.
        """
        if not 0 <= dim < self.dims:
            raise ValueError(f"dimension {dim} out of range for a {self.dims}-D flow")
        alpha = np.asarray(alpha, dtype=float)
        if np.any((alpha < 0.0) | (alpha > 1.0)):
            raise ValueError("quantile levels must lie in [0, 1]")
        single = np.ndim(states) == 1
        s = self._states(states)
        pre = np.zeros((len(s), self.dims))
        if dim > 0:
            if prefix is None:
                raise ValueError(f"quantile of dimension {dim} needs the observed prefix a_<{dim}")
            known = np.atleast_2d(np.asarray(prefix, dtype=float))[:, :dim]
            pre[:, :dim] = (known - self.normalizer.action_mean[:dim]) / self.normalizer.action_std[:dim]
        z = np.broadcast_to(self._base_value(alpha), (len(s),)).astype(float)
        q = self._forward_dim(dim, z, self._ctx(s, pre, dim))
        q = self.normalizer.actions_inv(q, dim=dim)
        return float(q[0]) if single else q

    def inverse(self, states, actions):
        """Base values ``z`` and ``log|dz/da|`` (summed over dimensions, raw units)."""
        s = self._states(states)
        a = self.normalizer.actions(np.asarray(actions, dtype=float).reshape(len(s), self.dims))
        z = np.empty_like(a)
        log_det = np.full(len(s), -float(np.sum(np.log(self.normalizer.action_std))))
        for j in range(self.dims):
            z[:, j], log_slope = self._inverse_dim(j, a[:, j], self._ctx(s, a, j))
            log_det = log_det - log_slope
        return z, log_det

    # -- losses in standardized space (graph nodes) -----------------------

    def aqf_loss_node(self, s, a, alpha):
        """Sum over dimensions of mean pinball at per-row levels ``alpha`` (teacher forced)."""
        total = 0.0
        s_node = constant(s)
        for j in range(self.dims):
            pred = self._forward_dim(j, constant(alpha[:, j]), self._ctx(s_node, a, j))
            total = pinball(constant(a[:, j]), pred, alpha[:, j]) + total
        return total

    def nll_node(self, s, a):
        """Mean negative log-likelihood in standardized space."""
        total = 0.0
        s_node = constant(s)
        for j in range(self.dims):
            z, log_slope = self._inverse_dim_node(j, constant(a[:, j]), self._ctx(s_node, a, j))
            total = (z.square() * 0.5 + HALF_LOG_2PI + log_slope).mean() + total
        return total

    # -- checkpoints --------------------------------------------------------

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "model": "flow",
            "kind": self.kind,
            "dimension_order": list(self.action_names),
            "stack_depth": self.stack_depth,
            "hidden": list(self.hidden),
            "base": self.base,
            "n_features": self.n_features,
            "conditioners": [[t.to_dict() for t in stack] for stack in self.stacks],
            "normalizer": self.normalizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model") != "flow":
            raise ValueError("not a flow checkpoint")
        base, coupling = parse_kind(d["kind"])
        flow = cls(d["n_features"], len(d["dimension_order"]), coupling, base, d["stack_depth"],
                   d["hidden"], rng=0, normalizer=Normalizer.from_dict(d["normalizer"]),
                   action_names=d["dimension_order"])
        from ..autodiff import DenseNet

        for stack, dicts in zip(flow.stacks, d["conditioners"]):
            for t, nd in zip(stack, dicts):
                t.net = DenseNet.from_dict(nd)
        return flow


def flow_generate(flow, states, z):
    return flow.generate(states, z)


def flow_quantile(flow, states, alpha, dim=0, prefix=None):
    return flow.quantile(states, alpha, dim, prefix)


def draw_levels(rng, n, dims, draws=1, tail_mix=0.0):
    """Uniform levels, with a ``tail_mix`` share drawn logit-uniformly on [-7, 7].

    The logit-uniform draws put about a third of their mass below 0.01 or above
    0.99, where uniform levels rarely land.
    """
    alpha = rng.random((n * draws, dims))
    if tail_mix > 0:
        tails = expit(rng.uniform(-7.0, 7.0, alpha.shape))
        alpha = np.where(rng.random(alpha.shape) < tail_mix, tails, alpha)
    return alpha


def aqf_loss(flow, batch, rng, draws=1):
    """Monte-Carlo quantile-flow loss of ``batch`` in raw units.

    Each row gets ``draws`` fresh uniform levels per dimension (drawn as
    ``rng.random((n * draws, dims))``); dimension ``j`` is conditioned on the
    true ``a_<j``.
    """
    if flow.base != "uniform":
        raise ValueError("the quantile-flow loss needs a uniform-base flow")
    n = len(batch)
    alpha = draw_levels(rng, n, flow.dims, draws)
    states = np.repeat(batch.states, draws, axis=0)
    actions = np.repeat(batch.actions[:, : flow.dims], draws, axis=0)
    total = 0.0
    for j in range(flow.dims):
        preds = flow.quantile(states, alpha[:, j], j, actions if j else None)
        r = actions[:, j] - np.asarray(preds)
        total += float(np.mean(np.maximum(alpha[:, j] * r, (alpha[:, j] - 1.0) * r)))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite quantile-flow loss")
    return total


def anf_nll(flow, batch):
    """Mean negative log-likelihood of ``batch`` in raw units (normal-base flows)."""
    if flow.base != "normal":
        raise ValueError("negative log-likelihood needs a normal-base flow")
    z, log_det = flow.inverse(batch.states, batch.actions[:, : flow.dims])
    log_base = -0.5 * z * z - HALF_LOG_2PI
    return float(np.mean(-(log_base.sum(axis=1) + log_det)))


def min_slope_ratio(flow, states, grid=None):
    """Smallest ``tau'(z) / b`` over sampled contexts and a z-grid (NLSQ flows), else ``tau' `` min."""
    s = flow._states(states)
    grid = np.linspace(-3.0, 3.0, 121) if grid is None else grid
    worst = math.inf
    pre = np.zeros((len(s), flow.dims))
    for j, stack in enumerate(flow.stacks):
        ctx = flow._ctx(s, pre, j)
        for t in stack:
            p = t.params(ctx)
            zz = grid[None, :]
            pp = {k: v[:, None] for k, v in p.items()}
            slope = t.dtau(pp, zz)
            scale = pp["b"] if "b" in pp else np.ones_like(slope)
            worst = min(worst, float(np.min(slope / scale)))
    return worst


def train_flow(train, kind, dims=1, config=None, seed=0, val=None, normalizer=None):
    """Fit a flow of ``kind`` (see ``KINDS``) by Adam on its own objective.

    Quantile flows minimize the Monte-Carlo pinball loss with ``config.mc_draws``
    fresh levels per row each epoch; likelihood flows minimize the NLL.
    Validation uses the mean pinball loss over ``LEVELS`` (quantile flows) or
    the NLL (likelihood flows), both in standardized units.

    Returns
    -------
    ConditionalFlow, list of dict
    """
    base, coupling = parse_kind(kind)
    config = config or TrainConfig()
    if len(train) == 0:
        raise ValueError("empty training set")
    if train.dims < dims:
        raise ValueError(f"training data has {train.dims} action dimensions, need {dims}")
    rng = np.random.default_rng(seed)
    normalizer = normalizer or Normalizer.fit(train)
    normalizer = Normalizer(normalizer.state_mean, normalizer.state_std,
                            normalizer.action_mean[:dims], normalizer.action_std[:dims])
    flow = ConditionalFlow(train.states.shape[1], dims, coupling, base, config.stack_depth,
                           config.conditioner_hidden, rng, normalizer,
                           train.action_names[:dims])
    x = normalizer.states(train.states)
    y = normalizer.actions(train.actions[:, :dims])
    draws = int(config.mc_draws)

    if base == "uniform":
        def batch_loss(idx, r):
            if draws > 1:
                idx = np.repeat(idx, draws)
            alpha = draw_levels(r, len(idx), dims, tail_mix=config.tail_mix)
            return flow.aqf_loss_node(x[idx], y[idx], alpha)
    else:
        def batch_loss(idx, _r):
            return flow.nll_node(x[idx], y[idx])

    val_loss = None
    if val is not None and len(val):
        xv = normalizer.states(val.states)
        yv = normalizer.actions(val.actions[:, :dims])
        if base == "uniform":
            def val_loss():
                total = 0.0
                for level in LEVELS:
                    alpha = np.full((len(xv), dims), level)
                    total += flow.aqf_loss_node(xv, yv, alpha).item()
                return total / len(LEVELS)
        else:
            def val_loss():
                return flow.nll_node(xv, yv).item()

    probe = train.states[rng.choice(len(train), size=min(256, len(train)), replace=False)]

    def monitor(epoch):
        ratio = min_slope_ratio(flow, probe)
        if not ratio > 0:
            raise RuntimeError(f"monotonicity violated at epoch {epoch}: min slope ratio {ratio}")
        monitor.ratios.append(ratio)

    monitor.ratios = []
    history = fit(flow.parameters, batch_loss, len(train), config, rng, val_loss, monitor)
    for entry, ratio in zip(history, monitor.ratios):
        entry["min_slope_ratio"] = ratio
    return flow, history
