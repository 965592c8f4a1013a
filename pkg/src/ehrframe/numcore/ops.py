"""Differentiable operations over :class:`Tensor`.

Every op validates shapes eagerly and returns a new tensor; gradients are
wired through the active :class:`Tape` only when an input requires them.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DTYPE, Tensor, as_tensor, check_finite, make_result

NEG_INF_BIAS = -1e9


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.shape[-1] == shape[0]:
        # row-sum through BLAS; numpy's strided reduction is far slower here
        flat = g.reshape(-1, shape[0])
        return np.ones(flat.shape[0], dtype=g.dtype) @ flat
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    check_finite(out, "div")

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(g.shape[:-1] + (bd.shape[0],))
                ga = _unbroadcast(ga, ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result(np.matmul(ad, bd), (a, b), bw, "matmul")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data).astype(DTYPE, copy=False)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                                               _unbroadcast(np.where(cond, 0, g), sb)), "where")


# -- elementwise unary ----------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * (out > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_result(out, (x,), bw, "gelu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(DTYPE)


def softplus(x) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = (np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))).astype(DTYPE)
    return make_result(out, (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    check_finite(out, "exp")
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    check_finite(out, "log")
    return make_result(out, (x,), lambda g: (g / xd,), "log")


def gate_log(x) -> Tensor:
    """log(x) for x > 0 and a large negative constant where x == 0.

    Used as an additive attention bias: a zero gate removes a key exactly,
    a positive gate scales its unnormalised attention weight by ``x``.
    """
    x = as_tensor(x)
    xd = x.data
    if (xd < 0).any():
        raise ValueError("gate_log needs non-negative input")
    live = xd > 0
    safe = np.where(live, xd, 1.0)
    out = np.where(live, np.log(safe), NEG_INF_BIAS).astype(DTYPE)
    return make_result(out, (x,), lambda g: (np.where(live, g / safe, 0.0),), "gate_log")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.power(xd, exponent).astype(DTYPE)
    check_finite(out, "power")
    return make_result(out, (x,), lambda g: (g * exponent * np.power(xd, exponent - 1),), "power")


# -- reductions and shape -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out, dtype=DTYPE), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x) -> Tensor:
    nd = as_tensor(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(x, idx) -> Tensor:
    """Indexing / slicing; fancy indices accumulate gradients with ``np.add.at``."""
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(x.data[idx], dtype=DTYPE), (x,), bw, "index")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of zero tensors")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = np.broadcast_to(x.data, tuple(shape)).copy()
    return make_result(out, (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return make_result(table.data[ids], (table,), bw, "embedding")


def scatter_rows(src, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place ``src[i]`` at row ``rows[i]`` of an otherwise-zero ``n_rows`` tensor."""
    src = as_tensor(src)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[0] != src.shape[0]:
        raise ShapeError("scatter_rows: row count mismatch")
    out = np.zeros((n_rows,) + src.shape[1:], dtype=DTYPE)
    out[rows] = src.data
    return make_result(out, (src,), lambda g: (g[rows],), "scatter_rows")


# -- neural building blocks -----------------------------------------------
# Reductions over a short trailing axis go through BLAS (x @ ones) or an
# unrolled elementwise loop; numpy's reduce is an order of magnitude slower
# on axes of a few dozen elements.

def _last_sum(x: np.ndarray) -> np.ndarray:
    return (x @ np.ones(x.shape[-1], dtype=x.dtype))[..., None]


def _last_mean(x: np.ndarray) -> np.ndarray:
    return (x @ np.full(x.shape[-1], 1.0 / x.shape[-1], dtype=x.dtype))[..., None]


def _last_max(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n > 64:
        return x.max(axis=-1, keepdims=True)
    m = x[..., 0].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        xd = x.data
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)
        return make_result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                           "softmax")
    e = np.exp(x.data - _last_max(x.data))
    out = e / _last_sum(e)
    return make_result(out, (x,), lambda g: (out * (g - _last_sum(g * out)),), "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("layer_norm over an empty axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs {n}")
    mu = _last_mean(x.data)
    xc = x.data - mu
    var = _last_mean(xc * xc)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - _last_mean(dxhat) - xhat * _last_mean(dxhat * xhat))
        return gx, gg, gb

    return make_result(out.astype(DTYPE, copy=False), (x, gain, bias), bw, "layer_norm")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits: softplus(z) - y*z."""
    logits = as_tensor(logits)
    return sub(softplus(logits), mul(logits, np.asarray(targets, dtype=DTYPE)))
