"""Dense tensors with an explicit reverse-mode tape.

A :class:`Tape` records every operation whose inputs live on it. Values are
numpy arrays (row-major); the tape stores, per node, the input tensors, the
output tensor and a closure mapping the output gradient to input gradients.

    >>> tape = Tape()
    >>> x = tape.watch(np.array([1.0, 2.0]), name="x")
    >>> loss = tsum(mul(x, x))
    >>> _ = backward(tape, loss)
    >>> x.grad
    array([2., 4.])

Only scalar broadcasting is supported; everything else must match exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Number
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DetachedTensor, EmptyClass, NonFinite, ShapeMismatch, ZeroMap

ZERO_NORM = 1e-12


class Tensor:
    """An n-dimensional array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "grad", "tape", "name", "__weakref__")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tape is not None})"


@dataclass(frozen=True)
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` (array or tensor data) as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else value
        leaf = Tensor(data, tape=self, name=name)
        self._leaves[id(leaf)] = leaf
        return leaf

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def record(self, data, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        out = Tensor(data, tape=self)
        self.nodes.append(Node(tuple(inputs), out, rule))
        self._produced.add(id(out))
        return out

    def owns(self, t: Tensor) -> bool:
        return t.tape is self and (id(t) in self._produced or id(t) in self._leaves)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` slot.

    Returns a mapping from leaf name to its (accumulated) gradient for the
    named leaves. Calling twice without clearing grads accumulates.
    """
    if not isinstance(loss, Tensor) or not tape.owns(loss):
        raise DetachedTensor("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or inp.tape is not tape:
                continue
            key = id(inp)
            pending[key] = pending[key] + gi if key in pending else gi

    out = {}
    for key, leaf in tape._leaves.items():
        g = pending.get(key)
        if g is not None:
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if leaf.name is not None and leaf.grad is not None:
            out[leaf.name] = leaf.grad
    return out


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise DetachedTensor("operands belong to different tapes")
            tape = t.tape
    return tape


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(data, inputs, rule) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, rule)


def ordered_sum(arr: np.ndarray, axis) -> np.ndarray:
    """Sum along ``axis`` (int or tuple) strictly in ascending index order.

    numpy's reductions use pairwise summation, whose rounding depends on the
    block layout; the sequential order here is reproducible by a plain loop.
    """
    arr = np.asarray(arr)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % arr.ndim for a in axes)
    rest = [a for a in range(arr.ndim) if a not in axes]
    moved = np.transpose(arr, axes + tuple(rest))
    flat = moved.reshape((-1,) + tuple(arr.shape[a] for a in rest))
    acc = flat[0].copy()
    for k in range(1, flat.shape[0]):
        acc = acc + flat[k]
    return acc


# --------------------------------------------------------------------------
# elementwise


def _binary_check(a: Tensor, b) -> None:
    if isinstance(b, Number):
        return
    if b.shape != a.shape and b.shape != ():
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, Number):
        return _emit(a.data + b, (a,), lambda g: (g,))
    b = _lift(b)
    _binary_check(a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, Number):
        return _emit(a.data - b, (a,), lambda g: (g,))
    b = _lift(b)
    _binary_check(a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, Number):
        return scale(a, b)
    b = _lift(b)
    _binary_check(a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (g * bv, _reduce_to(g * av, b.shape)))


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)
    if s == 1.0:
        return _emit(a.data.copy(), (a,), lambda g: (g,))
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add``, ``sub``, ``mul``, ``relu``, ``scale``."""
    if op_kind == "relu":
        return relu(a)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# --------------------------------------------------------------------------
# reductions and reshaping


def tsum(a, axis=None) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), rule)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def take_rows(a, index) -> Tensor:
    """``out[i] = a[index[i]]`` along the leading axis."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.intp)

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), rule)


def replace_at(a, cols, values) -> Tensor:
    """Copy of ``(n, m)`` ``a`` with ``a[i, cols[i]]`` set to ``values[i]``."""
    a, values = _lift(a), _lift(values)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])
    if a.ndim != 2 or values.shape != (a.shape[0],) or cols.shape != values.shape:
        raise ShapeMismatch("replace_at expects (n, m), n columns and n values")
    out = a.data.copy()
    out[rows, cols] = values.data

    def rule(g):
        ga = g.copy()
        ga[rows, cols] = 0.0
        return ga, g[rows, cols]

    return _emit(out, (a, values), rule)


def unit_rows(a, eps: float = ZERO_NORM) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    a = _lift(a)
    r = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(r < eps):
        raise ZeroMap("zero local feature cannot be unit-normalised")
    y = a.data / r

    def rule(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / r,)

    return _emit(y, (a,), rule)


def pick(a, labels, axis: int = 1) -> Tensor:
    """``out[n, ...] = a[n, labels[n], ...]`` along ``axis``."""
    a = _lift(a)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (a.shape[0],):
        raise ShapeMismatch("one label per leading entry required")
    idx = labels.reshape((-1,) + (1,) * (a.ndim - 1))
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def rule(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit(out, (a,), rule)


def global_avg_pool(a) -> Tensor:
    """Mean over the two trailing spatial axes: ``(..., d, w, h) -> (..., d)``."""
    a = _lift(a)
    if a.ndim < 3:
        raise ShapeMismatch("expected (..., d, w, h)")
    w, h = a.shape[-2:]
    shape = a.shape

    def rule(g):
        return (np.broadcast_to(g[..., None, None] / (w * h), shape).copy(),)

    return _emit(a.data.mean(axis=(-2, -1)), (a,), rule)


def avg_pool2(a) -> Tensor:
    """2x2 average downsampling of ``(n, c, H, W)`` with even H and W."""
    a = _lift(a)
    n, c, H, W = a.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"spatial size {H}x{W} is not even")
    out = a.data.reshape(n, c, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def rule(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (up,)

    return _emit(out, (a,), rule)


def l2norm(a, axis: int) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    a = _lift(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis))

    def rule(g):
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(coef, axis),)

    return _emit(norm, (a,), rule)


def variance(a, axis) -> Tensor:
    """Population variance over ``axis`` (int or tuple)."""
    a = _lift(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([a.shape[k] for k in axes]))
    centred = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centred * centred).mean(axis=axes)

    def rule(g):
        return (np.expand_dims(g, axes) * centred * (2.0 / count),)

    return _emit(out, (a,), rule)


# --------------------------------------------------------------------------
# softmax family


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFinite("non-finite logits")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (a,), rule)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (a,), rule)


# --------------------------------------------------------------------------
# convolutions and normalisation


def _batched(x: Tensor, ndim: int = 4):
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeMismatch(f"expected {ndim - 1}- or {ndim}-d input, got {x.shape}")
    return x, False


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``(n, c_in, H, W)`` (or unbatched) with
    ``(c_out, c_in, k, k)`` kernels, zero padding, no bias."""
    x, squeeze = _batched(_lift(x))
    kernel = _lift(kernel)
    if kernel.ndim != 4:
        raise ShapeMismatch("kernel must be c_out x c_in x k x k")
    n, c, H, W = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {ci}")
    if stride < 1 or kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeMismatch("kernel larger than padded input or bad stride")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    k = kernel.data
    out = np.ascontiguousarray(
        np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    )

    def rule(g):
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gk = np.tensordot(g, k, axes=([1], [0]))  # n, Ho, Wo, c, kh, kw
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                    j : j + stride * (Wo - 1) + 1 : stride] += gk[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pad : pad + H, pad : pad + W], dk

    y = _emit(out, (x, kernel), rule)
    return reshape(y, y.shape[1:]) if squeeze else y


def conv1x1(x, weights) -> Tensor:
    """Per-location linear map without bias: ``out[l] = sum_k W[k, l] x[k]``."""
    x, squeeze = _batched(_lift(x))
    weights = _lift(weights)
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"weights {weights.shape} do not match {x.shape[1]} channels")
    xv, wv = x.data, weights.data
    out = np.moveaxis(np.tensordot(xv, wv, axes=([1], [0])), -1, 1)

    def rule(g):
        dx = np.moveaxis(np.tensordot(g, wv, axes=([1], [1])), -1, 1)
        dw = np.tensordot(xv, g, axes=([0, 2, 3], [0, 2, 3]))
        return dx, dw

    y = _emit(np.ascontiguousarray(out), (x, weights), rule)
    return reshape(y, y.shape[1:]) if squeeze else y


def batch_norm(x, gain, shift, mean=None, var=None, eps: float = 1e-5):
    """Per-channel normalisation of ``(n, c, H, W)`` followed by scale/shift.

    With ``mean``/``var`` omitted the batch statistics are used (training).
    Returns ``(out, batch_mean, batch_var)``; the statistics are ``None`` in
    frozen mode.
    """
    x, gain, shift = _lift(x), _lift(gain), _lift(shift)
    if x.ndim != 4 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatch("batch_norm expects (n, c, H, W) with c-length gain/shift")
    xv = x.data
    frozen = mean is not None
    if frozen:
        mu = np.asarray(mean, dtype=xv.dtype)
        v = np.asarray(var, dtype=xv.dtype)
    else:
        mu = xv.mean(axis=(0, 2, 3))
        v = xv.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xv - mu[:, None, None]) * inv[:, None, None]
    out = xhat * gain.data[:, None, None] + shift.data[:, None, None]
    m = xv.shape[0] * xv.shape[2] * xv.shape[3]

    def rule(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gain.data[:, None, None]
        if frozen:
            dx = dxhat * inv[:, None, None]
        else:
            dx = (inv[:, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[:, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
            )
        return dx, dgain, dshift

    y = _emit(out, (x, gain, shift), rule)
    return y, (None if frozen else mu), (None if frozen else v)


# --------------------------------------------------------------------------
# feature-map geometry


def frobenius_norms(x: np.ndarray) -> np.ndarray:
    """Per-sample Frobenius norm of ``(n, ...)``, ascending-order summation."""
    flat = x.reshape(x.shape[0], -1)
    return np.sqrt(ordered_sum(flat * flat, axis=1))


def frobenius_normalize(a) -> Tensor:
    """Divide every sample of ``(n, ...)`` by its own Frobenius norm."""
    a = _lift(a)
    r = frobenius_norms(a.data)
    if np.any(r < ZERO_NORM):
        raise ZeroMap("feature map with vanishing Frobenius norm")
    rb = r.reshape((-1,) + (1,) * (a.ndim - 1))
    y = a.data / rb

    def rule(g):
        dot = (g * y).reshape(g.shape[0], -1).sum(axis=1).reshape(rb.shape)
        return ((g - y * dot) / rb,)

    return _emit(y, (a,), rule)


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Index order of ``rows`` (k, m) sorted lexicographically by value."""
    flat = rows.reshape(rows.shape[0], -1)
    return np.lexsort(flat.T[::-1])


def segment_mean(a, labels, num_segments: int) -> Tensor:
    """Mean of the rows of ``a`` sharing each label, for labels 0..num-1.

    Members are summed in a value-determined order so the result does not
    depend on the order of the rows.
    """
    a = _lift(a)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (a.shape[0],):
        raise ShapeMismatch("one label per row required")
    out = np.empty((num_segments,) + a.shape[1:], dtype=a.dtype)
    counts = np.bincount(labels, minlength=num_segments)[:num_segments]
    for c in range(num_segments):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise EmptyClass(f"class {c} has no members")
        rows = a.data[members]
        rows = rows[_canonical_order(rows)]
        acc = rows[0].copy()
        for r in rows[1:]:
            acc = acc + r
        out[c] = acc / members.size

    def rule(g):
        return (g[labels] / counts[labels].reshape((-1,) + (1,) * (a.ndim - 1)),)

    return _emit(out, (a,), rule)


def pairwise_sqdist(a, b) -> Tensor:
    """``out[i, j] = sum_k (a[i, k] - b[j, k])**2`` for ``(n, k)`` and ``(m, k)``."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = ordered_sum(diff * diff, axis=2)

    def rule(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _emit(out, (a, b), rule)


def matching_distance(a, b) -> Tensor:
    """Minimum-matching distance between location sets.

    ``a`` is ``(n, L, d)`` and ``b`` is ``(m, L', d)``; for every pair
    ``out[q, c] = sum_i min_j ||a[q, i] - b[c, j]||^2``.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[2] != b.shape[2]:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :, None, :] - b.data[None, :, None, :, :]
    sq = ordered_sum(diff * diff, axis=4)  # n, m, L, L'
    best = sq.argmin(axis=3)
    mins = np.take_along_axis(sq, best[..., None], axis=3)[..., 0]
    out = ordered_sum(mins, axis=2)

    def rule(g):
        chosen = np.take_along_axis(diff, best[..., None, None], axis=3)[:, :, :, 0, :]
        gd = 2.0 * g[:, :, None, None] * chosen  # n, m, L, d
        da = gd.sum(axis=1)
        m, Lb, d = b.shape
        rows = (np.arange(m)[None, :, None] * Lb + best).ravel()
        db = np.zeros((m * Lb, d), dtype=b.dtype)
        np.add.at(db, rows, -gd.reshape(-1, d))
        return da, db.reshape(b.shape)

    return _emit(out, (a, b), rule)
