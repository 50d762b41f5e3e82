"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tracked tensors; a single
backward sweep then yields gradients for all leaves. Tapes are short-lived
arenas, rebuilt for every training step, which keeps multi-step-rollout
backprop simple and deterministic. Tensors are immutable values; the networks
trained here are tiny, so everything runs in float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NumericalFault",
    "TapeError",
    "add",
    "sub",
    "mul",
    "matmul",
    "neg",
    "exp",
    "tanh",
    "sigmoid",
    "sin",
    "cos",
    "relu",
    "square",
    "absolute",
    "wrap_angle",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "narrow",
    "reshape",
    "broadcast_to",
    "custom_op",
    "as_array",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericalFault(ArithmeticError):
    """An operation produced a non-finite value from finite inputs."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, detached tensor, reuse)."""


_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Immutable dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "node_id")

    def __init__(self, data, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.node_id is not None

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only operation record supporting one backward sweep.

    Use as a context manager; at most one tape is active per thread of
    execution (tapes are never shared between workers).
    """

    def __init__(self):
        # each node: (kind, tuple of (input_node_id, vjp_fn))
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watch(self, data) -> Tensor:
        """Register a leaf parameter and return its tracked tensor."""
        arr = np.asarray(data, dtype=np.float64)
        self.nodes.append(("leaf", ()))
        return Tensor(arr, node_id=len(self.nodes) - 1)

    def _record(self, kind, out_data, in_pairs) -> Tensor:
        self.nodes.append((kind, tuple(in_pairs)))
        return Tensor(out_data, node_id=len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict:
        """Run the reverse sweep from a scalar loss.

        Returns a map from node id to accumulated gradient array. The tape is
        consumed afterwards and cannot be swept again.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if not isinstance(loss, Tensor) or not loss.tracked:
            raise TapeError("loss is detached: it was not produced under this tape")
        if loss.node_id >= len(self.nodes):
            raise TapeError("loss does not belong to this tape")
        if loss.data.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            kind, pairs = self.nodes[nid]
            for in_id, vjp in pairs:
                contrib = vjp(g)
                acc = grads.get(in_id)
                if acc is None:
                    grads[in_id] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    acc += contrib
            if kind == "leaf":
                grads[nid] = g
        return grads

    def gradients(self, loss: Tensor, wrt) -> list:
        """Gradient of a scalar loss w.r.t. each tensor in `wrt`.

        Unreached leaves get zero gradients of matching shape.
        """
        grad_map = self.backward(loss)
        out = []
        for t in wrt:
            if not t.tracked:
                raise TapeError("cannot differentiate w.r.t. a detached tensor")
            out.append(grad_map.get(t.node_id, np.zeros(t.data.shape)))
        return out


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _pairs(kind, inputs_and_vjps):
    return [(t.node_id, vjp) for t, vjp in inputs_and_vjps if t.tracked]


def _emit(kind, out_data, inputs_and_vjps) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericalFault(f"op '{kind}' produced non-finite values")
    pairs = _pairs(kind, inputs_and_vjps)
    if _ACTIVE_TAPE is None or not pairs:
        return Tensor(out_data)
    return _ACTIVE_TAPE._record(kind, out_data, pairs)


def custom_op(kind, out_data, inputs_and_vjps) -> Tensor:
    """Record an externally computed op (e.g. a fused kernel) on the tape.

    `inputs_and_vjps` is a sequence of (tensor, vjp_fn) pairs; each vjp_fn
    maps the output gradient to that input's gradient contribution.
    """
    return _emit(kind, out_data, inputs_and_vjps)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"op '{kind}': shapes {a.shape} and {b.shape} do not broadcast") from None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data
    return _emit("add", out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                              (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data
    return _emit("sub", out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                              (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit("mul", out, [(a, lambda g: _unbroadcast(g * bd, ad.shape)),
                              (b, lambda g: _unbroadcast(g * ad, bd.shape))])


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"op 'matmul': shapes {ad.shape} and {bd.shape} do not conform")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeMismatch(f"op 'matmul': shapes {ad.shape} and {bd.shape} do not conform") from None

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)

    return _emit("matmul", out, [(a, vjp_a), (b, vjp_b)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, [(a, lambda g: g * out)])


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("sin", np.sin(ad), [(a, lambda g: g * np.cos(ad))])


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("cos", np.cos(ad), [(a, lambda g: -g * np.sin(ad))])


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _emit("relu", out, [(a, lambda g: g * mask)])


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(over="ignore"):
        out = ad * ad
    return _emit("square", out, [(a, lambda g: g * (2.0 * ad))])


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _emit("abs", np.abs(a.data), [(a, lambda g: g * s)])


def wrap_angle(a) -> Tensor:
    """Wrap values to (-pi, pi]; derivative is 1 almost everywhere."""
    a = _as_tensor(a)
    wrapped = a.data - 2.0 * np.pi * np.ceil((a.data - np.pi) / (2.0 * np.pi))
    return _emit("wrap_angle", wrapped, [(a, lambda g: g)])


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit("sum", out, [(a, vjp)])


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= shape[ax]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, shape).copy()
        g = np.expand_dims(g / count, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit("mean", out, [(a, vjp)])


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    pairs = []
    offset = 0
    for t in tensors:
        w = t.data.shape[axis]
        start = offset

        def vjp(g, start=start, w=w):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + w)
            return g[tuple(sl)]

        pairs.append((t, vjp))
        offset += w
    return _emit("concat", out, pairs)


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeMismatch(
            f"op 'slice': window [{start}, {start + length}) exceeds axis {axis} of {a.data.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    out = a.data[tuple(sl)]
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[tuple(sl)] = g
        return full

    return _emit("slice", out, [(a, vjp)])


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    out = a.data.reshape(shape)
    return _emit("reshape", out, [(a, lambda g: g.reshape(orig))])


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    _check_broadcast("broadcast", a.data, np.empty(shape))
    out = np.broadcast_to(a.data, shape).copy()
    orig = a.data.shape
    return _emit("broadcast", out, [(a, lambda g: _unbroadcast(g, orig))])
