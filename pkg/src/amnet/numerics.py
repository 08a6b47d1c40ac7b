"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with tape:``) are
recorded if any input requires a gradient.  ``backward(loss, tape)`` walks
the record in reverse and accumulates ``grad`` on every leaf tensor that
requires one.  Outside a tape every operation is a plain numpy computation,
which is what inference uses.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from amnet.errors import DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "sigmoid",
    "softmax",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "embedding",
    "concat",
    "take",
    "index",
    "tsum",
    "mean",
    "binary_cross_entropy",
    "bce_with_logits",
    "mse",
]


class Tensor:
    """An n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf", "retain_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True
        self.retain_grad = False

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._is_leaf = False
        t.retain_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes record into the innermost one.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    t = Tensor._from_op(out)
    if _ACTIVE and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(t, inputs, grad_fn))
    return t


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        if not _ACTIVE:
            raise RuntimeError("no tape given and none active")
        tape = _ACTIVE[-1]
    seed = np.ones_like(loss.data)
    if loss._is_leaf:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.retain_grad:
            _accumulate(node.out, g)
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), grad_fn)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # (..., k) @ (k, n): fold the batch axes into rows and run one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), grad_fn)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), grad_fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a, indices) -> Tensor:
    """Gather rows along axis 0; the gradient scatters back (repeats add up)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), grad_fn)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids of any shape, result shape ids.shape + (d,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids out of range for table {table.shape}")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), grad_fn)


def index(a, key) -> Tensor:
    """Basic or fancy indexing ``a[key]``."""
    a = _as_tensor(a)
    out = a.data[key]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _record(np.array(out), (a,), grad_fn)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), grad_fn)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# -- normalisation and attention helpers ------------------------------------


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable boolean, True = excluded) removes entries before
    normalisation; a slice with every entry excluded yields all zeros.
    """
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    peak = z.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(z - peak)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total == 0.0, 1.0, total)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), grad_fn)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a last axis of size > 1")
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias shapes {gain.shape}, {bias.shape} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), grad_fn)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses -----------------------------------------------------------------


def binary_cross_entropy(p, target, eps: float = 1e-12) -> Tensor:
    """Mean BCE of probabilities ``p`` against 0/1 (or soft) targets."""
    p = _as_tensor(p)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"bce shapes differ: {p.shape} vs {y.shape}")
    q = np.clip(p.data, eps, 1.0 - eps)
    n = max(p.size, 1)
    loss = -(y * np.log(q) + (1.0 - y) * np.log1p(-q)).sum() / n

    def grad_fn(g):
        inside = (p.data > eps) & (p.data < 1.0 - eps)
        return (g * inside * (q - y) / (q * (1.0 - q)) / n,)

    return _record(np.asarray(loss), (p,), grad_fn)


def bce_with_logits(z, target) -> Tensor:
    """Mean BCE of ``sigmoid(z)`` computed stably from logits."""
    z = _as_tensor(z)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce shapes differ: {z.shape} vs {y.shape}")
    n = max(z.size, 1)
    # softplus(z) - y*z
    loss = (np.logaddexp(0.0, z.data) - y * z.data).sum() / n
    return _record(np.asarray(loss), (z,), lambda g: (g * (_sigmoid(z.data) - y) / n,))


def mse(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {y.shape}")
    n = max(pred.size, 1)
    diff = pred.data - y
    return _record(np.asarray((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max(max|a|, max|b|, tiny)."""
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / denom

