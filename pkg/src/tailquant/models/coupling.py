"""Monotone coupling transformers: affine and non-linear squared (NLSQ).

Each transformer maps a scalar ``z`` to ``tau(z; h)`` where ``h`` comes from
its own conditioner network. The functions below accept either numpy arrays
or autodiff nodes, so the same formulas serve training and inference.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import DenseNet, Node, constant

# max |t / (1 + t^2)^2| is 9 / (16 sqrt 3); this factor keeps tau' >= 0.01 * b
NLSQ_C_BOUND = 0.99 * 8.0 * math.sqrt(3.0) / 9.0
NLSQ_D_FLOOR = 1e-3


def _exp(x):
    return x.exp() if isinstance(x, Node) else np.exp(x)


def _tanh(x):
    return x.tanh() if isinstance(x, Node) else np.tanh(x)


def _softplus(x):
    return x.softplus() if isinstance(x, Node) else np.logaddexp(0.0, x)


def _log(x):
    return x.log() if isinstance(x, Node) else np.log(x)


def _col(raw, i):
    return raw[:, i] if raw.ndim == 2 else raw[..., i]


# -- affine ---------------------------------------------------------------

def affine_params(raw):
    return {"shift": _col(raw, 0), "log_scale": _col(raw, 1)}


def affine_tau(p, z):
    return p["shift"] + _exp(p["log_scale"]) * z


def affine_dtau(p, z):
    return _exp(p["log_scale"]) + 0.0 * z


def affine_inverse(p, y):
    return (np.asarray(y, dtype=float) - p["shift"]) * np.exp(-p["log_scale"])


# -- NLSQ -----------------------------------------------------------------

def nlsq_params(raw):
    """Constrained NLSQ parameters from unconstrained conditioner outputs.

    ``b = exp(b_raw)``, ``d = softplus(d_raw) + 1e-3``,
    ``c = 0.99 * (8 sqrt3 / 9) * (b / d) * tanh(c_raw)``, ``a`` and ``g`` free.
    """
    b = _exp(_col(raw, 1))
    d = _softplus(_col(raw, 3)) + NLSQ_D_FLOOR
    c = NLSQ_C_BOUND * (b / d) * _tanh(_col(raw, 2))
    return {"a": _col(raw, 0), "b": b, "c": c, "d": d, "g": _col(raw, 4)}


def nlsq_tau(p, z):
    t = p["d"] * z + p["g"]
    return p["a"] + p["b"] * z + p["c"] / (t * t + 1.0)


def nlsq_dtau(p, z):
    t = p["d"] * z + p["g"]
    q = t * t + 1.0
    return p["b"] - 2.0 * p["c"] * p["d"] * t / (q * q)


def nlsq_inverse(p, y, tol=1e-10, bisect_iters=60, newton_iters=5):
    """Solve ``nlsq_tau(p, z) = y`` for ``z`` (numpy arrays only).

    Brackets by geometric expansion around the affine-part estimate, then
    bisects and finishes with a few Newton steps.
    """
    p = {k: np.asarray(v, dtype=float) for k, v in p.items()}
    y = np.asarray(y, dtype=float)
    if not all(np.all(np.isfinite(v)) for v in p.values()) or not np.all(np.isfinite(y)):
        raise ValueError("cannot invert NLSQ transform with non-finite parameters or targets")
    shape = np.broadcast(y, *p.values()).shape
    y = np.broadcast_to(y, shape)
    p = {k: np.broadcast_to(v, shape) for k, v in p.items()}
    z0 = (y - p["a"]) / p["b"]
    # |c / (1 + t^2)| <= |c|, so the root lies within |c| / b of z0
    width = np.abs(p["c"]) / p["b"] + 1.0
    lo, hi = z0 - width, z0 + width
    for _ in range(200):
        bad = (nlsq_tau(p, lo) > y) | (nlsq_tau(p, hi) < y)
        if not bad.any():
            break
        width = np.where(bad, 2.0 * width, width)
        lo, hi = z0 - width, z0 + width
    else:
        raise ValueError("failed to bracket NLSQ inverse")
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        below = nlsq_tau(p, mid) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    z = 0.5 * (lo + hi)
    for _ in range(newton_iters):
        r = nlsq_tau(p, z) - y
        if np.all(np.abs(r) <= tol):
            break
        z = np.clip(z - r / nlsq_dtau(p, z), lo - (hi - lo), hi + (hi - lo))
    return z


class _Transformer:
    kind = ""
    n_raw = 0

    def __init__(self, n_in, hidden=(64, 64), rng=None):
        self.net = DenseNet((n_in, *hidden, self.n_raw), rng)
        # start near identity: small output weights
        self.net.weights[-1].value = self.net.weights[-1].value * 0.01

    @property
    def parameters(self):
        return self.net.parameters

    def raw(self, ctx):
        """Unconstrained conditioner outputs; a Node when ``ctx`` is a Node."""
        if isinstance(ctx, Node):
            return self.net(ctx)
        return self.net.predict(np.atleast_2d(np.asarray(ctx, dtype=float)))

    def params(self, ctx):
        return self.realize(self.raw(ctx))

    def forward(self, z, ctx):
        return self.tau(self.params(ctx), z)

    def derivative(self, z, ctx):
        return self.dtau(self.params(ctx), z)

    def inverse(self, y, ctx):
        return self.invert(self.params(ctx), y)

    def inverse_node(self, y, ctx):
        """Differentiable inverse via one implicit-function Newton step.

        The root ``z*`` is found numerically; the node ``z* - (tau(z*) - y) / tau'(z*)``
        has value ``z*`` and the implicit-function gradients w.r.t. ``y`` and
        the conditioner parameters.
        """
        p = self.params(ctx)
        pv = {k: v.value for k, v in p.items()}
        yv = y.value if isinstance(y, Node) else np.asarray(y, dtype=float)
        z_star = constant(self.invert(pv, yv))
        slope = constant(self.dtau(pv, z_star.value))
        return z_star - (self.tau(p, z_star) - y) / slope

    def to_dict(self):
        return self.net.to_dict()


class AffineTransformer(_Transformer):
    """``tau(z) = shift + exp(log_scale) * z``."""

    kind = "affine"
    n_raw = 2
    realize = staticmethod(affine_params)
    tau = staticmethod(affine_tau)
    dtau = staticmethod(affine_dtau)
    invert = staticmethod(affine_inverse)

    def inverse_node(self, y, ctx):
        p = self.params(ctx)
        return (y - p["shift"]) * _exp(-p["log_scale"])


class NlsqTransformer(_Transformer):
    """``tau(z) = a + b z + c / (1 + (d z + g)^2)`` with the constrained parameterization."""

    kind = "nlsq"
    n_raw = 5
    realize = staticmethod(nlsq_params)
    tau = staticmethod(nlsq_tau)
    dtau = staticmethod(nlsq_dtau)
    invert = staticmethod(nlsq_inverse)


TRANSFORMERS = {"affine": AffineTransformer, "nlsq": NlsqTransformer}


def coupling_forward(t, z, ctx):
    return t.forward(z, ctx)


def coupling_inverse(t, y, ctx):
    return t.inverse(y, ctx)
