"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive evaluated during a forward pass.
Nodes are appended in evaluation order, which is already a topological
order, so :meth:`Tape.backward` simply walks the record in reverse.

All primitives accept arrays with arbitrary leading batch dimensions and
broadcast like numpy; gradients are reduced back to each operand's shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when a backward pass does not match its recorded forward."""


class Var:
    """A value recorded on a tape."""

    __slots__ = ("data", "grad", "tape", "parents", "backward_fn", "name", "index")

    def __init__(self, data: np.ndarray, tape: "Tape", parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.parents: tuple[Var, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Records primitives for a single forward/backward pair.

    One tape belongs to one execution context. Parameters wrapped as leaves
    are copied by reference, so callers must not mutate them between the
    forward and the backward pass.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def leaf(self, data, name: str | None = None) -> Var:
        arr = np.asarray(data, dtype=self.dtype)
        var = self._push(Var(arr, self, name=name))
        if name is not None:
            self.leaves[name] = var
        return var

    def constant(self, data) -> Var:
        """A leaf whose gradient is never requested."""
        return self._push(Var(np.asarray(data, dtype=self.dtype), self))

    def record(self, data: np.ndarray, parents: Sequence[Var], backward_fn: Callable) -> Var:
        for p in parents:
            if p.tape is not self:
                raise TapeError("operand recorded on a different tape")
        return self._push(Var(data, self, parents, backward_fn))

    def _push(self, var: Var) -> Var:
        var.index = len(self.nodes)
        self.nodes.append(var)
        return var

    def backward(self, out: Var, upstream=None) -> dict[str, np.ndarray]:
        """Propagate ``upstream`` (d loss / d out) through the record.

        Returns the gradients of all named leaves. Leaves never reached get
        a zero gradient so callers can iterate parameters uniformly.
        """
        if out.tape is not self:
            raise TapeError("output was recorded on a different tape")
        if upstream is None:
            upstream = np.ones_like(out.data)
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != out.data.shape:
            raise TapeError(f"upstream gradient shape {upstream.shape} != output shape {out.data.shape}")
        for node in self.nodes:
            node.grad = None
        out.grad = upstream.copy()
        for node in reversed(self.nodes[: out.index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                g = _unbroadcast(g, parent.data.shape)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        return {
            name: (v.grad if v.grad is not None else np.zeros_like(v.data))
            for name, v in self.leaves.items()
        }


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    if grad.shape != shape:
        raise TapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad


# ---------------------------------------------------------------- primitives


def add(a: Var, b: Var) -> Var:
    return a.tape.record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    return a.tape.record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    return a.tape.record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Var, c: float) -> Var:
    return a.tape.record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    """Batched ``a @ b`` over the last two axes."""

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return a.tape.record(a.data @ b.data, (a, b), backward)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w + b`` with ``w`` laid out (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def swap_last(a: Var) -> Var:
    return a.tape.record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.tape.record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Var, shape: Sequence[int]) -> Var:
    src = a.data.shape
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Var], axis: int) -> Var:
    tape = parts[0].tape
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(data, tuple(parts), backward)


def take(a: Var, start: int, stop: int, axis: int) -> Var:
    """Slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return a.tape.record(a.data[index], (a,), backward)


def mean(a: Var, axis: int, keepdims: bool = False) -> Var:
    n = a.data.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return a.tape.record(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def softmax_rows(a: Var) -> Var:
    """Softmax over the last axis with max subtraction."""
    y = softmax_array(a.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape.record(y, (a,), backward)


def sigmoid(a: Var) -> Var:
    y = sigmoid_array(a.data)
    return a.tape.record(y, (a,), lambda g: (g * y * (1.0 - y),))


def channel_norm(x: Var, eps: float) -> Var:
    """``(x - mu) / (sigma + eps)`` with statistics over the patch axis (-2).

    sigma is the population standard deviation. Where sigma is exactly zero
    the centred input is zero too, and the sigma branch of the gradient is
    taken as zero.
    """
    data = x.data
    n = data.shape[-2]
    mu = data.mean(axis=-2, keepdims=True)
    centred = data - mu
    sigma = np.sqrt((centred * centred).mean(axis=-2, keepdims=True))
    denom = sigma + eps
    y = centred / denom

    def backward(g):
        safe = np.where(sigma > 0, sigma, 1.0)
        d_sigma = -(g * centred).sum(axis=-2, keepdims=True) / (denom * denom)
        d_var_term = np.where(sigma > 0, d_sigma / (n * safe), 0.0)
        gc = g / denom + d_var_term * centred
        return (gc - gc.mean(axis=-2, keepdims=True),)

    return x.tape.record(y, (x,), backward)


def softmax_array(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
