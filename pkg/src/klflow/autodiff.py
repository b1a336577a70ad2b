"""Minimal dense-tensor reverse-mode autodiff.

Just enough machinery to train small coupling-flow conditioner networks:
a fixed set of ops (matmul, add, mul, tanh, exp, log, sum, mean, square),
an explicit tape, and an Adam updater. Everything is float64.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "backward",
    "matmul",
    "add",
    "mul",
    "tanh",
    "exp",
    "log",
    "tsum",
    "tmean",
    "square",
]

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "tapes", None)
    if not stack:
        raise RuntimeError("no active Tape; wrap the computation in 'with Tape():'")
    return stack[-1]


class Tensor:
    """Immutable float64 array node. Leaves may carry parameters."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    # operator sugar; constants are wrapped as non-grad leaves
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Op record for one loss evaluation. Nodes are appended in creation
    order, so reversing the list is a valid reverse topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def backward(self, output):
        return backward(self, output)


def _record(op, out_data, parents, vjps):
    if not np.all(np.isfinite(out_data)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(out_data)))
        raise FloatingPointError(f"non-finite result in op '{op}' at index {bad[0]}")
    out = Tensor(out_data)
    out._op = op
    keep = tuple(p.requires_grad for p in parents)
    if any(keep):
        out.requires_grad = True
        out._parents = parents
        out._vjps = vjps
    _active_tape().nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _record(
        "matmul",
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _record(
        "add",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _record(
        "mul",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), (lambda g: g * out,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        bad = np.argwhere(np.atleast_1d(a.data) <= 0.0)
        raise FloatingPointError(f"log of non-positive value at index {bad[0]}")
    out = np.log(a.data)
    return _record("log", out, (a,), (lambda g: g / a.data,))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _record("sum", out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / n, a.data.shape).copy()

    return _record("mean", out, (a,), (vjp,))


def square(a):
    a = _as_tensor(a)
    return _record("square", a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def backward(tape, output):
    """Accumulate gradients of a scalar output into .grad of every
    reachable node that requires grad. Leaves off the path keep grad None;
    callers should zero parameter grads before each pass."""
    if output.data.ndim != 0 and output.data.size != 1:
        raise ValueError("backward requires a scalar output")
    if output._op == "leaf":
        g = np.ones_like(output.data)
        output.grad = g if output.grad is None else output.grad + g
        return
    pending = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            if parent._op == "leaf":
                parent.grad = pg if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


def leaf_grads(params):
    """Gradients for a parameter list after backward(); zeros where a
    parameter was unreachable from the output."""
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def zero_grads(params):
    for p in params:
        p.grad = None


class Adam:
    """Adam with bias correction, conventional constants (0.9, 0.999, 1e-8)."""

    def __init__(self, params, beta_m=0.9, beta_v=0.999, eps=1e-8):
        self.params = list(params)
        self.beta_m = beta_m
        self.beta_v = beta_v
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        if lr <= 0:
            raise ValueError("lr must be positive")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ValueError("gradient shape mismatch")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; Adam step aborted")
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.first_moment[i] = self.beta_m * self.first_moment[i] + (1 - self.beta_m) * g
            self.second_moment[i] = self.beta_v * self.second_moment[i] + (1 - self.beta_v) * g * g
            m_hat = self.first_moment[i] / (1 - self.beta_m**t)
            v_hat = self.second_moment[i] / (1 - self.beta_v**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state, lr):
    """Functional wrapper: one Adam update of `params` in place."""
    state.params = list(params)
    state.step(grads, lr)
    return params
