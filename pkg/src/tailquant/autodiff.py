"""Reverse-mode automatic differentiation, dense ReLU networks and Adam.

Every node in the computation graph carries a numpy array (a 0-d array for
scalars). Operations broadcast like numpy; gradients flowing back into a
broadcast operand are summed over the broadcast axes.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "GraphCycleError",
    "NonFiniteGradientError",
    "backward",
    "constant",
    "parameter",
    "concat",
    "DenseNet",
    "forward_net",
    "Adam",
]

FLOAT = np.float64


class ShapeError(ValueError):
    """Raised when an input does not match the expected dimensions."""


class GraphCycleError(RuntimeError):
    """Raised when a computation graph contains a cycle."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer receives a NaN or infinite gradient."""


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_node(x):
    return x if isinstance(x, Node) else Node(x)


class Node:
    """A value in a computation graph.

    Parameters
    ----------
    value : array_like
        Converted to a float64 array.
    parents : tuple of Node
        Inputs of the operation that produced this node.
    vjp : callable
        Maps the gradient w.r.t. this node to a tuple of gradients
        w.r.t. ``parents`` (the local partial derivatives applied to it).
    """

    __slots__ = ("value", "grad", "parents", "vjp", "op", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjp=None, op="", requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=FLOAT)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, op={self.op!r})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_node(other)
        a, b = self.value.shape, other.value.shape
        return Node(
            self.value + other.value,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "+",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_node(other)
        a, b = self.value.shape, other.value.shape
        return Node(
            self.value - other.value,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "-",
        )

    def __rsub__(self, other):
        return _as_node(other) - self

    def __neg__(self):
        return Node(-self.value, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _as_node(other)
        x, y = self.value, other.value
        return Node(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "*",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_node(other)
        x, y = self.value, other.value
        out = x / y
        return Node(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
            "/",
        )

    def __rtruediv__(self, other):
        return _as_node(other) / self

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("only constant exponents are supported")
        x = self.value
        return Node(x**p, (self,), lambda g: (g * p * x ** (p - 1),), f"**{p}")

    def __matmul__(self, other):
        other = _as_node(other)
        x, w = self.value, other.value
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"cannot multiply shapes {x.shape} and {w.shape}")
        return Node(x @ w, (self, other), lambda g: (g @ w.T, x.T @ g), "@")

    def __getitem__(self, index):
        x = self.value
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (int, slice)) for p in parts)

        def vjp(g):
            full = np.zeros_like(x)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Node(x[index], (self,), vjp, "[]")

    # -- elementwise functions -------------------------------------------

    def relu(self):
        # subgradient 0 at the kink
        mask = self.value > 0
        return Node(np.where(mask, self.value, 0.0), (self,), lambda g: (g * mask,), "relu")

    def exp(self):
        out = np.exp(self.value)
        return Node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.value
        return Node(np.log(x), (self,), lambda g: (g / x,), "log")

    def tanh(self):
        out = np.tanh(self.value)
        return Node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def softplus(self):
        x = self.value
        out = np.logaddexp(0.0, x)
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return Node(out, (self,), lambda g: (g * sig,), "softplus")

    def square(self):
        x = self.value
        return Node(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None):
        x = self.value

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Node(x.sum(axis=axis), (self,), vjp, "sum")

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        x = self.value
        return Node(x.reshape(*shape), (self,), lambda g: (g.reshape(x.shape),), "reshape")

    def backward(self):
        return backward(self)


def constant(value, name=None):
    return Node(value, name=name)


def parameter(value, name=None):
    return Node(value, requires_grad=True, name=name)


def concat(nodes, axis=-1):
    """Concatenate nodes along ``axis``."""
    nodes = [_as_node(n) for n in nodes]
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Node(out, nodes, vjp, "concat")


def _topological_order(root):
    """Iterative DFS post-order; raises on a back edge."""
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, iter(root.parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        for parent in it:
            s = state.get(id(parent))
            if s == 1:
                raise GraphCycleError(f"cycle detected through {parent!r}")
            if s is None and parent.requires_grad:
                state[id(parent)] = 1
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root):
    """Propagate d(root)/d(node) into ``node.grad`` for every node in the graph.

    Gradients are recomputed from scratch on each call, so repeated calls on
    the same graph give identical results.

    Returns
    -------
    dict
        Maps every leaf node with ``requires_grad`` to its gradient array.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            g = node.grad = np.zeros_like(node.value)
        if not node.parents:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return leaves


class DenseNet:
    """Fully connected network with ReLU hidden layers and a linear output.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(5, 64, 64, 64, 64, 1)``.
    rng : numpy.random.Generator or int, optional
        Source of the He-uniform initial weights. Biases start at zero.
    """

    activation = "relu"

    def __init__(self, sizes, rng=None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / n_in)
            self.weights.append(parameter(rng.uniform(-limit, limit, (n_in, n_out)), f"W{i}"))
            self.biases.append(parameter(np.zeros(n_out), f"b{i}"))

    @property
    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def _check(self, x):
        x = np.asarray(x.value if isinstance(x, Node) else x, dtype=FLOAT)
        if x.shape[-1:] != (self.n_in,):
            raise ShapeError(f"expected input of width {self.n_in}, got shape {x.shape}")

    def __call__(self, x):
        """Differentiable forward pass on a batch ``(n, n_in)``; returns a Node."""
        self._check(x)
        h = _as_node(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.relu()
        return h

    def predict(self, x):
        """Graph-free forward pass; accepts a vector or a batch."""
        self._check(x)
        h = np.asarray(x, dtype=FLOAT)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def to_dict(self):
        return {
            "layer_sizes": list(self.sizes),
            "weights": [w.value.ravel().tolist() for w in self.weights],
            "biases": [b.value.tolist() for b in self.biases],
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("activation", "relu") != "relu":
            raise ValueError(f"unsupported activation {d['activation']!r}")
        net = cls(d["layer_sizes"], rng=0)
        for i, (w, b) in enumerate(zip(d["weights"], d["biases"])):
            shape = net.weights[i].value.shape
            net.weights[i].value = np.asarray(w, dtype=FLOAT).reshape(shape)
            net.biases[i].value = np.asarray(b, dtype=FLOAT).reshape(shape[1])
        return net


def forward_net(net, x):
    """Evaluate ``net`` on a single input vector and return the output vector."""
    x = np.asarray(x, dtype=FLOAT)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return net.predict(x)


class Adam:
    """Adam with bias correction.

    Parameters
    ----------
    params : list of Node
        Leaves updated in place (their ``value`` arrays are replaced).
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        """Apply one update. ``grads`` is aligned with ``params`` (or a dict keyed by them)."""
        if isinstance(grads, dict):
            grads = [grads.get(p, np.zeros_like(p.value)) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                p = self.params[i]
                raise NonFiniteGradientError(
                    f"non-finite gradient for parameter {i} ({p.name or 'unnamed'})"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
