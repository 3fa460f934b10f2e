"""Differentiable primitives.

Every function takes ``Tensor`` (or array-like constants), computes the forward
value with numpy and registers a backward closure returning one gradient per
parent. Broadcasting follows numpy rules; gradients are summed back to the
operand shape.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log",
    "matmul", "sum", "mean", "reshape", "transpose", "getitem", "concat",
    "unfold", "softmax", "log_softmax", "layer_norm", "gelu", "relu",
    "embedding", "conv1d", "nll_loss", "cross_entropy",
)


def primitive_set() -> dict:
    """Name -> callable for every differentiable primitive."""
    return {name: globals()[name] for name in PRIMITIVES}


def _lift(a, b):
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_result(out, (a,), lambda g: (g / ad,), "log")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]`` with batch broadcasting."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# -- reductions and shape ops ------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = a.data[key]
    advanced = _is_advanced(key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def unfold(a, size: int, step: int) -> Tensor:
    """Sliding windows along the last axis: ``[..., L] -> [..., N, size]``.

    ``N = (L - size) // step + 1``; trailing samples past the last full window
    are dropped.
    """
    a = as_tensor(a)
    length = a.shape[-1]
    if size < 1 or step < 1:
        raise ShapeError(f"unfold: size and step must be >= 1, got {size}, {step}")
    if length < size:
        raise ShapeError(f"unfold: length {length} shorter than window {size}")
    n = (length - size) // step + 1
    out = np.ascontiguousarray(sliding_window_view(a.data, size, axis=-1)[..., : (n - 1) * step + 1 : step, :])
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        stop = (n - 1) * step + 1
        for j in range(size):
            full[..., j : j + stop : step] += g[..., :, j]
        return (full,)

    return make_result(out, (a,), backward, "unfold")


# -- nonlinearities ----------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    n = x.shape[-1]
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
    for p in parents[1:]:
        if p.shape != (n,):
            raise ShapeError(f"layer_norm: affine shape {p.shape} != ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def backward(g):
        grads = []
        gx = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            grads.append(inv * (gx - s1 / n - xhat * s2 / n))
        else:
            grads.append(None)
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(grads)

    return make_result(out, parents, backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(_GELU_K)
    x2 = x * x
    t = x2 * k
    t += 1
    t *= x
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        d = x2 * (3 * k)
        d += 1
        d *= c
        d *= 1 - t * t
        d *= x
        d += 1 + t
        d *= 0.5
        d *= g
        return (d,)

    return make_result(out, (a,), backward, "gelu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- lookup, convolution, losses ------------------------------------------

def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any integer shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def conv1d(x, w, b=None, groups: int = 1, padding=0) -> Tensor:
    """Grouped 1-D convolution (cross-correlation), stride 1.

    x: [B, Cin, L]; w: [Cout, Cin // groups, K]; b: [Cout] or None.
    ``padding`` is an int (both sides) or a (left, right) pair of zero pads.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x [B, C, L] and w [O, C/g, K], got {x.shape}, {w.shape}")
    bsz, cin, length = x.shape
    cout, cin_g, k = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv1d: channels in={cin} out={cout} not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise ShapeError(f"conv1d: weight expects {cin_g * groups} input channels, got {cin}")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    lout = length + pl + pr - k + 1
    if lout < 1:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {length + pl + pr}")
    cout_g = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    xg = xp.reshape(bsz, groups, cin_g, -1)
    wg = w.data.reshape(groups, cout_g, cin_g, k)
    depthwise = cin_g == 1 and cout_g == 1

    if depthwise:
        wd = w.data[:, 0, :]
        out = np.zeros((bsz, cout, lout), dtype=np.result_type(xp, wd))
        for j in range(k):
            out += wd[None, :, j : j + 1] * xp[:, :, j : j + lout]
    else:
        out = np.zeros((bsz, groups, cout_g, lout), dtype=np.result_type(xp, wg))
        for j in range(k):
            out += np.matmul(wg[None, :, :, :, j], xg[:, :, :, j : j + lout])
        out = out.reshape(bsz, cout, lout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None]
        parents.append(b)

    def backward(g):
        gx = gw = None
        if depthwise:
            if w.requires_grad:
                win = sliding_window_view(xp, k, axis=-1)[:, :, :lout, :]
                gw = np.einsum("bcl,bclk->ck", g, win)[:, None, :]
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, :, j : j + lout] += g * wd[None, :, j : j + 1]
                gx = gxp[:, :, pl : pl + length]
        else:
            gg = g.reshape(bsz, groups, cout_g, lout)
            if w.requires_grad:
                gw = np.empty_like(wg)
                for j in range(k):
                    # [b, g, o, l] x [b, g, c, l] -> [g, o, c]
                    gw[..., j] = np.matmul(gg, np.swapaxes(xg[:, :, :, j : j + lout], -1, -2)).sum(axis=0)
                gw = gw.reshape(cout, cin_g, k)
            if x.requires_grad:
                gxp = np.zeros_like(xg)
                wt = np.swapaxes(wg, 1, 2)  # [g, c, o, k]
                for j in range(k):
                    gxp[:, :, :, j : j + lout] += np.matmul(wt[None, :, :, :, j], gg)
                gx = gxp.reshape(bsz, cin, -1)[:, :, pl : pl + length]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)) if b.requires_grad else None)
        return tuple(grads)

    return make_result(out, parents, backward, "conv1d")


def nll_loss(logp, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true.

    logp: [..., V] log-probabilities; targets: integer array of shape [...].
    """
    logp = as_tensor(logp)
    targets = np.asarray(targets)
    if targets.shape != logp.shape[:-1]:
        raise ShapeError(f"nll_loss: targets {targets.shape} do not match logp {logp.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logp.shape[-1]):
        raise IndexError("nll_loss: target id out of range")
    weights = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = weights.sum()
    if count <= 0:
        raise ValueError("nll_loss: no positions selected by mask")
    flat = logp.data.reshape(-1, logp.shape[-1])
    picked = flat[np.arange(flat.shape[0]), targets.reshape(-1)]
    value = -(picked * weights.reshape(-1)).sum() / count
    shape, dtype = logp.shape, logp.dtype

    def backward(g):
        full = np.zeros((flat.shape[0], shape[-1]), dtype=dtype)
        full[np.arange(flat.shape[0]), targets.reshape(-1)] = -weights.reshape(-1) / count
        return ((full * g).reshape(shape),)

    return make_result(np.asarray(value, dtype=dtype), (logp,), backward, "nll_loss")


def cross_entropy(logits, targets, mask=None) -> Tensor:
    return nll_loss(log_softmax(logits, axis=-1), targets, mask)
