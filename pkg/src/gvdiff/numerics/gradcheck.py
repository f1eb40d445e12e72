"""Central-difference gradient checking for the hand-written backward passes."""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from gvdiff.errors import GVDiffError
from gvdiff.numerics import ops
from gvdiff.numerics.rng import RngStream


class DiffOp(NamedTuple):
    """``forward(*inputs) -> output``; ``backward(inputs, gout) -> grads``
    (one gradient per input, same shapes)."""

    forward: Callable
    backward: Callable | None


_REGISTRY: dict[str, DiffOp] = {}


def register_op(name, forward, backward):
    _REGISTRY[name] = DiffOp(forward, backward)


def get_op(name) -> DiffOp:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise GVDiffError("unknown-op", name) from None


def registered_ops():
    return sorted(_REGISTRY)


def numerical_grads(forward, inputs, gout, h=1e-5, wrt=None):
    """Central differences of ``sum(gout * forward(*inputs))``."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    grads = [None] * len(inputs)
    for i in wrt:
        x = inputs[i]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = np.sum(gout * forward(*inputs))
            flat[j] = orig - h
            fm = np.sum(gout * forward(*inputs))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
        grads[i] = g
    return grads


def relative_error(analytic, numeric, floor=1e-4):
    """Elementwise ``|a - n| / max(|a|, |n|, floor * max(1, max|a|))``.

    The floor keeps entries that are zero up to roundoff from dominating;
    it scales with the largest gradient of the same input.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = floor * max(1.0, float(np.abs(a).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale)
    return np.abs(a - n) / denom


def grad_check(op, inputs, h=1e-5, wrt=None, seed=0, floor=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``op`` is a registered name or a :class:`DiffOp`. A random output
    cotangent (from the ``gradcheck`` stream of ``seed``) turns the op into a
    scalar function so all input entries are checked at once.
    """
    if isinstance(op, str):
        op = get_op(op)
    if op.backward is None:
        raise GVDiffError("no-backward", "operator has no analytic backward pass")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = op.forward(*inputs)
    gout = RngStream(seed, "gradcheck").normal(np.shape(out))
    analytic = op.backward(inputs, gout)
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    numeric = numerical_grads(op.forward, inputs, gout, h=h, wrt=wrt)
    worst = 0.0
    for i in wrt:
        if analytic[i] is None:
            raise GVDiffError("no-backward", f"no gradient for input {i}")
        err = relative_error(analytic[i], numeric[i], floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# -- built-in registrations ----------------------------------------------------

def _softmax_bwd(inputs, gout):
    y = ops.softmax(inputs[0])
    return [ops.softmax_backward(y, gout)]


def _attn_fwd(q, k, v, bias=None):
    return ops.attention_forward(q, k, v, bias)[0]


def _attn_bwd(inputs, gout):
    _, cache = ops.attention_forward(*inputs)
    gq, gk, gv, gb = ops.attention_backward(cache, gout)
    return [gq, gk, gv] + ([gb] if len(inputs) > 3 else [])


def _linear_bwd(inputs, gout):
    x, w, b = inputs
    return list(ops.linear_backward(x, w, gout))


def _mlp_fwd(x, w1, b1, w2, b2):
    return ops.mlp_forward(x, ops.MLPWeights(w1, b1, w2, b2))


def _mlp_bwd(inputs, gout):
    x, *w = inputs
    gx, gw = ops.mlp_backward(x, ops.MLPWeights(*w), gout)
    return [gx, *gw]


def _ln_bwd(inputs, gout):
    _, cache = ops.layer_norm_forward(*inputs)
    return list(ops.layer_norm_backward(cache, gout))


def _sigmoid_bwd(inputs, gout):
    s = ops.sigmoid(inputs[0])
    return [gout * s * (1 - s)]


register_op("softmax", ops.softmax, _softmax_bwd)
register_op("attention", _attn_fwd, _attn_bwd)
register_op("linear", ops.linear, _linear_bwd)
register_op("mlp", _mlp_fwd, _mlp_bwd)
register_op("layer_norm", ops.layer_norm, _ln_bwd)
register_op("gelu", ops.gelu, lambda inputs, g: [ops.gelu_backward(inputs[0], g)])
register_op("sigmoid", ops.sigmoid, _sigmoid_bwd)
register_op("fourier_embed", lambda c: ops.fourier_embed(c, 4), None)
