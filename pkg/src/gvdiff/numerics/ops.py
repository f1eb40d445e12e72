"""Differentiable operators with hand-written vector-Jacobian products.

Each forward function has a matching ``*_backward``. Forward functions that
need intermediate values for the backward pass come in a ``*_forward``
variant returning ``(output, cache)``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from gvdiff._backend import kernels
from gvdiff.errors import GVDiffError

_GELU_C = math.sqrt(2.0 / math.pi)


# -- softmax -----------------------------------------------------------------

def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise GVDiffError("empty-softmax", "softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, gy, axis=-1):
    return y * (gy - (y * gy).sum(axis=axis, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# -- attention ---------------------------------------------------------------

class AttentionCache(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    scale: float
    bias_shape: tuple | None
    squeeze: bool


def attention_forward(q, k, v, bias=None):
    """``softmax(q k^T / sqrt(d) + bias) v`` with leading batch dims.

    ``q`` is (..., Sq, d), ``k`` (..., Sk, d), ``v`` (..., Sk, dv). ``bias``
    must broadcast to (..., Sq, Sk); a per-key bias is shaped (..., 1, Sk).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.ndim != k.ndim:
        raise GVDiffError(
            "attention-shape", f"q{q.shape} k{k.shape} v{v.shape} do not line up"
        )
    squeeze = q.ndim == 2
    lead = q.shape[:-2]
    sq, d = q.shape[-2:]
    sk = k.shape[-2]
    q3 = q.reshape(-1, sq, d)
    k3 = k.reshape(-1, sk, d)
    v3 = v.reshape(-1, sk, v.shape[-1])
    if bias is None:
        bias_shape = None
        b3 = np.broadcast_to(np.zeros((1, 1, 1)), (q3.shape[0], sq, sk))
    else:
        bias = np.asarray(bias, dtype=np.float64)
        bias_shape = bias.shape
        try:
            b3 = np.broadcast_to(bias, lead + (sq, sk)).reshape(-1, sq, sk) \
                if lead else np.broadcast_to(bias, (sq, sk))[None]
        except ValueError:
            raise GVDiffError(
                "attention-shape", f"bias {bias.shape} not broadcastable to {(sq, sk)}"
            ) from None
    scale = 1.0 / math.sqrt(d)
    out, probs = kernels.attention_forward(q3, k3, v3, b3, scale)
    out = out.reshape(lead + (sq, v.shape[-1]))
    probs = probs.reshape(lead + (sq, sk))
    return out, AttentionCache(q, k, v, probs, scale, bias_shape, squeeze)


def scaled_dot_attention(q, k, v, bias=None):
    return attention_forward(q, k, v, bias)[0]


def attention_weights(q, k, bias=None):
    """The row-stochastic attention matrix used by :func:`scaled_dot_attention`."""
    q = np.asarray(q, dtype=np.float64)
    v = np.zeros(np.shape(k)[:-1] + (1,))
    return attention_forward(q, k, v, bias)[1].probs


def _reduce_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def attention_backward(cache: AttentionCache, gout):
    """Returns ``(gq, gk, gv, gbias)``; ``gbias`` is None when no bias was given."""
    q, k, v, probs, scale = cache.q, cache.k, cache.v, cache.probs, cache.scale
    sq, d = q.shape[-2:]
    sk = k.shape[-2]
    gq, gk, gv, gl = kernels.attention_backward(
        q.reshape(-1, sq, d), k.reshape(-1, sk, d), v.reshape(-1, sk, v.shape[-1]),
        probs.reshape(-1, sq, sk),
        np.ascontiguousarray(gout, dtype=np.float64).reshape(-1, sq, v.shape[-1]),
        scale,
    )
    gbias = None
    if cache.bias_shape is not None:
        gbias = _reduce_to(gl.reshape(probs.shape), cache.bias_shape)
    return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape), gbias


# -- affine / activation / MLP -----------------------------------------------

def linear(x, w, b=None):
    y = np.matmul(x, w)
    return y if b is None else y + b


def linear_backward(x, w, gy, has_bias=True):
    """Returns ``(gx, gw, gb)`` for ``y = x @ w + b`` with any leading dims."""
    gx = np.matmul(gy, w.T)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0) if has_bias else None
    return gx, gw, gb


def gelu(x):
    """Tanh approximation of the Gaussian error linear unit."""
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, gy):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def identity(x):
    return x


class MLPWeights(NamedTuple):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _check_mlp(x, wts):
    w1, b1, w2, b2 = wts
    if (np.shape(x)[-1] != w1.shape[0] or b1.shape != (w1.shape[1],)
            or w2.shape[0] != w1.shape[1] or b2.shape != (w2.shape[1],)):
        raise GVDiffError(
            "mlp-shape",
            f"x[..,{np.shape(x)[-1]}] w1{w1.shape} b1{b1.shape} w2{w2.shape} b2{b2.shape}",
        )


def mlp_forward(x, weights, activation="gelu"):
    """Two affine layers with an activation in between.

    ``activation`` is ``"gelu"`` (default) or ``"identity"``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_mlp(x, weights)
    act = gelu if activation == "gelu" else identity
    h = linear(x, weights.w1, weights.b1)
    return linear(act(h), weights.w2, weights.b2)


def mlp_backward(x, weights, gy, activation="gelu"):
    """Returns ``(gx, MLPWeights-of-gradients)``."""
    x = np.asarray(x, dtype=np.float64)
    h = linear(x, weights.w1, weights.b1)
    a = gelu(h) if activation == "gelu" else h
    ga, gw2, gb2 = linear_backward(a, weights.w2, gy)
    gh = gelu_backward(h, ga) if activation == "gelu" else ga
    gx, gw1, gb1 = linear_backward(x, weights.w1, gh)
    return gx, MLPWeights(gw1, gb1, gw2, gb2)


# -- layer norm --------------------------------------------------------------

LN_EPS = 1e-5


def layer_norm_forward(x, scale, shift, eps=LN_EPS):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise GVDiffError("norm-shape", "layer norm over a zero-width feature axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * scale + shift, (xhat, rstd, scale)


def layer_norm(x, scale, shift, eps=LN_EPS):
    return layer_norm_forward(x, scale, shift, eps)[0]


def layer_norm_backward(cache, gy):
    """Returns ``(gx, gscale, gshift)``."""
    xhat, rstd, scale = cache
    d = xhat.shape[-1]
    g2 = gy.reshape(-1, d)
    gscale = (g2 * xhat.reshape(-1, d)).sum(axis=0)
    gshift = g2.sum(axis=0)
    gxhat = gy * scale
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, gscale, gshift


# -- embeddings / smoothing --------------------------------------------------

def fourier_embed(coords, num_freqs):
    """``[sin(2^k pi c), cos(2^k pi c)]`` for k = 0..num_freqs-1.

    Output layout is frequency-major: for each k, the sines of all coords
    followed by their cosines. Length is ``2 * num_freqs * len(coords)``.
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1)
    parts = []
    for k in range(int(num_freqs)):
        arg = (2.0 ** k) * math.pi * c
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts) if parts else np.zeros(0)


def gaussian_kernel_1d(sigma, radius):
    if not sigma > 0:
        raise GVDiffError("blur-sigma", f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise GVDiffError("blur-radius", f"radius must be >= 1, got {radius}")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (d / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_2d(grid, sigma, radius):
    """Blur a 2-D grid with a truncated, normalized Gaussian.

    Kernel mass that would fall outside the grid is folded back onto the
    mirrored in-bounds cells, so every input cell keeps its full mass
    (total sum preserved) and constant grids are fixed points.

    Accepts an ndarray or any object with a ``grid`` attribute; in the latter
    case a copy of the object with the blurred grid is returned.
    """
    wrapper = None
    if hasattr(grid, "grid"):
        wrapper, grid = grid, grid.grid
    k = gaussian_kernel_1d(sigma, int(radius))
    out = kernels.blur_2d(np.ascontiguousarray(grid, dtype=np.float64), k)
    if wrapper is None:
        return out
    from dataclasses import replace
    return replace(wrapper, grid=out)


def area_resize(grid, out_h, out_w):
    """Resize by area averaging: each output cell is the mean of the input
    area it covers (fractional overlaps weighted)."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    return _area_matrix(out_h, h) @ grid @ _area_matrix(out_w, w).T


def _area_matrix(n_out, n_in):
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * n_in / n_out, (i + 1) * n_in / n_out
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
        m[i] /= m[i].sum()
    return m
