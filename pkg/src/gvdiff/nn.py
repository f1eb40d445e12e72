"""Parameterized layers built on :mod:`gvdiff.numerics`.

Every layer exposes ``forward(...) -> (output, cache)`` and
``backward(cache, grad_output)``; the backward pass accumulates into each
:class:`Parameter`'s ``grad`` and returns gradients for the inputs.
"""
from __future__ import annotations

import math

import numpy as np

from gvdiff.numerics import (
    Parameter,
    RngStream,
    attention_backward,
    attention_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
)


class Module:
    def parameters(self):
        out = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Parameter):
                        out.append(item)
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def init_normal(rng: RngStream, name, shape, std):
    return rng.spawn(name).normal(shape) * std


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng, group="base", bias=True, zero=False, std=None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        w = np.zeros((d_in, d_out)) if zero else init_normal(rng, name + ".w", (d_in, d_out), std)
        self.w = Parameter(name + ".w", w, group)
        self.b = Parameter(name + ".b", np.zeros(d_out), group) if bias else None

    def forward(self, x):
        y = np.matmul(x, self.w.data)
        if self.b is not None:
            y = y + self.b.data
        return y, x

    def backward(self, x, gy):
        gx, gw, gb = linear_backward(x, self.w.data, gy, self.b is not None)
        self.w.accumulate(gw)
        if self.b is not None:
            self.b.accumulate(gb)
        return gx


class LayerNorm(Module):
    def __init__(self, name, d, group="base"):
        self.scale = Parameter(name + ".scale", np.ones(d), group)
        self.shift = Parameter(name + ".shift", np.zeros(d), group)

    def forward(self, x):
        return layer_norm_forward(x, self.scale.data, self.shift.data)

    def backward(self, cache, gy):
        gx, gs, gb = layer_norm_backward(cache, gy)
        self.scale.accumulate(gs)
        self.shift.accumulate(gb)
        return gx


class Attention(Module):
    """Single-head attention with query/key/value/output projections.

    ``zero_out`` zero-initializes the output projection so a fresh residual
    branch contributes exactly nothing.
    """

    def __init__(self, name, d_query, d_context, d_model, rng, group="base", zero_out=False):
        self.q = Linear(name + ".q", d_query, d_model, rng, group, bias=False)
        self.k = Linear(name + ".k", d_context, d_model, rng, group, bias=False)
        self.v = Linear(name + ".v", d_context, d_model, rng, group, bias=False)
        self.o = Linear(name + ".o", d_model, d_query, rng, group, zero=zero_out)

    def forward(self, xq, xkv, bias=None):
        q, cq = self.q.forward(xq)
        k, ck = self.k.forward(xkv)
        v, cv = self.v.forward(xkv)
        a, ca = attention_forward(q, k, v, bias)
        y, co = self.o.forward(a)
        return y, (cq, ck, cv, ca, co)

    def backward(self, cache, gy):
        """Returns ``(g_query_input, g_context_input, g_bias)``."""
        cq, ck, cv, ca, co = cache
        ga = self.o.backward(co, gy)
        gq, gk, gv, gbias = attention_backward(ca, ga)
        gxq = self.q.backward(cq, gq)
        gxkv = self.k.backward(ck, gk) + self.v.backward(cv, gv)
        return gxq, gxkv, gbias


def sinusoidal_embedding(t, width, max_period=10000.0):
    half = width // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = float(t) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if width % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb
