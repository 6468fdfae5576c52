"""Differentiable primitives and layer operations on :class:`Tensor`.

Feature maps are channels-last: ``(batch, height, width, channels)``.  The
convolution and pooling routines also accept a single unbatched
``(height, width, channels)`` map and return an unbatched result.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, ContractError, Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
ELU_ALPHA = 1.0


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return make_node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero on and below the floor.  NaN passes through."""
    a = as_tensor(a)
    mask = a.data > floor
    return make_node(np.where(a.data <= floor, floor, a.data), (a,), lambda g: (g * mask,), "clamp_min")


def relu(a) -> Tensor:
    return clamp_min(a, 0.0)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), _bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), _bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return make_node(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def _bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(a.data[index], (a,), _bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(a.data @ b.data, (a, b), _bw, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with an explicit output, e.g. ``"bij,bjd->bid"``."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if len(set(own)) != len(own):
            raise ContractError(f"repeated index within one operand is unsupported: {subscripts}")
        stray = set(own) - set(other) - set(out_sub)
        if stray:
            raise ContractError(f"indices {sorted(stray)} are summed inside a single operand: {subscripts}")

    def _bw(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data, optimize=True)
        return ga, gb

    return make_node(np.einsum(subscripts, a.data, b.data, optimize=True), (a, b), _bw, "einsum")


# ---------------------------------------------------------------------------
# activations and normalisers
# ---------------------------------------------------------------------------

def elu(a, alpha: float = ELU_ALPHA) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, alpha * neg_part)
    return make_node(out, (a,), lambda g: (g * np.where(pos, 1.0, alpha * (neg_part + 1.0)),), "elu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), _bw, "softmax")


def apply_activation(a, kind: str, axis: int = -1) -> Tensor:
    if kind == "elu":
        return elu(a)
    if kind == "softmax":
        return softmax(a, axis=axis)
    raise ContractError(f"unknown activation {kind!r}")


def vector_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, a.data / n, 0.0)
        return (g * unit,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return make_node(out, (a,), _bw, "vector_norm")


def squash(s, axis: int = -1) -> Tensor:
    """Rescale each vector to length ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    s = as_tensor(s)
    n = np.sqrt((s.data * s.data).sum(axis=axis, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = 1.0 / (n + 1.0 / n)  # n / (1 + n^2), exactly 0 at n = 0
        # d factor / dn divided by n; the s s^T term it multiplies vanishes at 0
        slope = np.where(n > 0, (1.0 / n - n) / (1.0 + n * n) ** 2, 0.0)

    def _bw(g):
        dot = (g * s.data).sum(axis=axis, keepdims=True)
        return (factor * g + slope * dot * s.data,)

    return make_node(s.data * factor, (s,), _bw, "squash")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In train mode the batch statistics normalise the input and the running
    buffers move towards them by exponential averaging (``momentum`` is the
    weight on the old value).  Eval mode reads the buffers only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"gamma/beta must have shape ({channels},), got {gamma.shape}, {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data = momentum * running_var.data + (1.0 - momentum) * var
    elif mode == "eval":
        mu, var = running_mean.data, running_var.data
    else:
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    count = x.size // channels

    def _bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if mode == "train":
            dx = inv_std / count * (
                count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_node(gamma.data * xhat + beta.data, (x, gamma, beta), _bw, "batch_norm")


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval is the identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def grl(x, lam: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * upstream`` backward."""
    x = as_tensor(x)
    if lam < 0:
        raise ContractError(f"reversal coefficient must be nonnegative, got {lam}")
    return make_node(x.data.copy(), (x,), lambda g: (-lam * g,), "grl")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding in (None, "valid"):
        return 0, 0
    if padding == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    return _pair(padding)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, kernel, stride=(1, 1), padding="valid", bias=None) -> Tensor:
    """Cross-correlation of a channels-last map with a ``(kh, kw, Cin, Cout)`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    x, unbatched = _as_batch(x)
    kh, kw, cin, cout = kernel.shape
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ContractError(f"stride must be >= 1, got {(sh, sw)}")
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels but kernel expects {cin}")
    ph, pw = _resolve_padding(padding, kh, kw)
    n, h, w, _ = x.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    # (n, ho, wo, cin, kh, kw) -> rows of (kh, kw, cin) patches
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)

    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def _bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, ph : ph + h, pw : pw + w, :]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    result = make_node(out, parents, _bw, "conv2d")
    return reshape(result, result.shape[1:]) if unbatched else result


def avg_pool2d(x, window=(2, 2), stride=None) -> Tensor:
    """Mean over each ``window`` (no padding); ``stride`` defaults to the window."""
    x = as_tensor(x)
    x, unbatched = _as_batch(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else (wh, ww))
    n, h, w, c = x.shape
    if wh > h or ww > w:
        raise DimensionError(f"pooling window {(wh, ww)} larger than input {(h, w)}")
    ho, wo = conv_output_size(h, wh, sh, 0), conv_output_size(w, ww, sw, 0)
    windows = sliding_window_view(x.data, (wh, ww), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    out = windows.mean(axis=(-2, -1))
    scale = 1.0 / (wh * ww)

    def _bw(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(wh):
            for j in range(ww):
                gx[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += gs
        return (gx,)

    result = make_node(out, (x,), _bw, "avg_pool2d")
    return reshape(result, result.shape[1:]) if unbatched else result
