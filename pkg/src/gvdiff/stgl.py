"""Spatial-temporal grounding layer.

Grounded tokens fuse an object phrase embedding with a Fourier embedding of
its box; they are smoothed across frames by a zero-initialized temporal
attention. Each :class:`StglBlock` then runs, pre-normalized and residual:

1. self-attention over a frame's visual tokens with an additive per-key
   grounding bias,
2. grounding attention over ``[visual; grounded]`` tokens whose outputs are
   cut back to the visual rows and scaled by ``gate * beta * tanh(gamma)``,
3. cross-attention to the prompt tokens,
4. attention across frames at each spatial position (zero-initialized).
"""
from __future__ import annotations

import math

import numpy as np

from gvdiff.errors import GVDiffError
from gvdiff.nn import Attention, LayerNorm, Linear, Module
from gvdiff.numerics import (
    MLPWeights,
    Parameter,
    RngStream,
    fourier_embed,
    gelu,
    gelu_backward,
    register_op,
)

COORDS_PER_CONDITION = 4


class HashTextEmbedder:
    """Deterministic stand-in for a text encoder.

    Each string maps to a unit-norm Gaussian vector drawn from a stream keyed
    by the string itself, so equal strings give identical vectors.
    """

    pad_token = "<pad>"

    def __init__(self, width=32, seed=0):
        self.width = int(width)
        self.seed = int(seed)
        self._cache = {}

    def embed(self, phrase):
        vec = self._cache.get(phrase)
        if vec is None:
            v = RngStream(self.seed, "text:" + phrase).normal(self.width)
            vec = v / np.linalg.norm(v)
            vec.setflags(write=False)
            self._cache[phrase] = vec
        return vec

    def embed_prompt(self, prompt, num_tokens):
        """Word-level token table of shape (num_tokens, width), padded."""
        words = prompt.lower().split()[:num_tokens]
        words += [self.pad_token] * (num_tokens - len(words))
        return np.stack([self.embed(w) for w in words])


# -- grounded features --------------------------------------------------------

def grounding_inputs(track, embedder, num_freqs):
    """Per-(frame, object) text vectors, Fourier coordinates and presence mask.

    Returns ``(text (N, M, dt), coords (N, M, dc), present (N, M) bool)``.
    Absent slots are zero-filled; the encoder swaps in its null embeddings.
    """
    n, m = track.num_frames, track.num_objects
    dc = 2 * num_freqs * COORDS_PER_CONDITION
    text = np.zeros((n, m, embedder.width))
    coords = np.zeros((n, m, dc))
    present = np.zeros((n, m), dtype=bool)
    for i, obj in enumerate(track.objects):
        vec = embedder.embed(obj.phrase) if obj.phrase else None
        for j, cond in enumerate(obj.conditions):
            if cond is None or vec is None:
                continue
            text[j, i] = vec
            coords[j, i] = fourier_embed(cond.coords(), num_freqs)
            present[j, i] = True
    return text, coords, present


class GroundedEncoder(Module):
    """``g = MLP([text, Fourier(coords)])`` with learnable null embeddings."""

    def __init__(self, text_width, num_freqs, grounded_width, rng, hidden=None, group="stga"):
        self.text_width = text_width
        self.num_freqs = num_freqs
        dc = 2 * num_freqs * COORDS_PER_CONDITION
        hidden = hidden or 2 * grounded_width
        self.null_text = Parameter("grounded.null_text", rng.spawn("null_text").normal(text_width) * 0.1, group)
        self.null_coord = Parameter("grounded.null_coord", rng.spawn("null_coord").normal(dc) * 0.1, group)
        self.fc1 = Linear("grounded.fc1", text_width + dc, hidden, rng, group)
        self.fc2 = Linear("grounded.fc2", hidden, grounded_width, rng, group)

    @property
    def weights(self):
        return MLPWeights(self.fc1.w.data, self.fc1.b.data, self.fc2.w.data, self.fc2.b.data)

    def assemble(self, text, coords, present):
        if text.shape[-1] != self.text_width:
            raise GVDiffError(
                "grounded-width", f"embedder width {text.shape[-1]} != {self.text_width}")
        mask = present[..., None]
        t = np.where(mask, text, self.null_text.data)
        c = np.where(mask, coords, self.null_coord.data)
        return np.concatenate([t, c], axis=-1)

    def forward(self, text, coords, present):
        x = self.assemble(text, coords, present)
        h, c1 = self.fc1.forward(x)
        y, c2 = self.fc2.forward(gelu(h))
        # absent slots take the null token itself, so they match it bit for
        # bit whatever the batch shape (same function, so gradients agree)
        y = np.where(present[..., None], y, self.null_feature())
        return y, (present, h, c1, c2)

    def backward(self, cache, gy):
        present, h, c1, c2 = cache
        ga = self.fc2.backward(c2, gy)
        gx = self.fc1.backward(c1, gelu_backward(h, ga))
        absent = ~present
        dt = self.text_width
        self.null_text.accumulate(gx[..., :dt][absent].sum(axis=0))
        self.null_coord.accumulate(gx[..., dt:][absent].sum(axis=0))

    def null_feature(self):
        """The grounded token of an absent slot."""
        x = np.concatenate([self.null_text.data, self.null_coord.data])
        h = x @ self.fc1.w.data + self.fc1.b.data
        return gelu(h) @ self.fc2.w.data + self.fc2.b.data


def encode_grounded_features(track, embedder, encoder: GroundedEncoder):
    """Grounded tokens of shape (frames, objects, grounded_width)."""
    if embedder.width != encoder.text_width:
        raise GVDiffError(
            "grounded-width", f"embedder width {embedder.width} != {encoder.text_width}")
    return encoder.forward(*grounding_inputs(track, embedder, encoder.num_freqs))[0]


class TemporalAttention(Module):
    """Residual attention along axis 0 (frames), independently for every
    index of axis 1. The output projection starts at zero."""

    def __init__(self, name, width, rng, group):
        self.norm = LayerNorm(name + ".norm", width, group)
        self.attn = Attention(name + ".attn", width, width, width, rng, group, zero_out=True)

    def forward(self, x):
        xt = np.swapaxes(x, 0, 1)
        h, cn = self.norm.forward(xt)
        a, ca = self.attn.forward(h, h)
        return x + np.swapaxes(a, 0, 1), (cn, ca)

    def backward(self, cache, gy):
        cn, ca = cache
        ga = np.swapaxes(gy, 0, 1)
        gq, gkv, _ = self.attn.backward(ca, ga)
        gx = self.norm.backward(cn, gq + gkv)
        return gy + np.swapaxes(gx, 0, 1)


def temporal_attend_grounded(g, layer: TemporalAttention):
    return layer.forward(g)[0]


# -- the block ------------------------------------------------------------------

class StglBlock(Module):
    def __init__(self, name, width, text_width, grounded_width, rng, beta=1.0, bias_gain=0.0):
        self.width = width
        self.beta = float(beta)
        self.norm_self = LayerNorm(name + ".norm_self", width)
        self.self_attn = Attention(name + ".self_attn", width, width, width, rng)
        self.bias_gain = Parameter(name + ".bias_gain", np.array(float(bias_gain)), "stga")
        self.norm_stga = LayerNorm(name + ".norm_stga", width, "stga")
        self.g_proj = Linear(name + ".g_proj", grounded_width, width, rng, "stga")
        self.stga_attn = Attention(name + ".stga_attn", width, width, width, rng, "stga")
        self.gamma = Parameter(name + ".gamma", np.array(0.0), "stga")
        self.norm_cross = LayerNorm(name + ".norm_cross", width)
        self.cross_attn = Attention(name + ".cross_attn", width, text_width, width, rng)
        self.temporal = TemporalAttention(name + ".temporal", width, rng, "temporal")

    # individual stages ---------------------------------------------------
    def self_attention_forward(self, z, bias=None):
        """``bias`` is (N, S) per-key; scaled by the block's bias gain."""
        if bias is not None:
            if bias.shape[-1] != z.shape[-2]:
                raise GVDiffError(
                    "bias-length", f"bias has {bias.shape[-1]} entries for {z.shape[-2]} tokens")
            bias = self.bias_gain.data * bias[..., None, :]
        h, cn = self.norm_self.forward(z)
        a, ca = self.self_attn.forward(h, h, bias)
        return z + a, (cn, ca)

    def self_attention_backward(self, cache, raw_bias, gy):
        cn, ca = cache
        gq, gkv, gbias = self.self_attn.backward(ca, gy)
        if gbias is not None:
            self.bias_gain.accumulate(np.sum(gbias[..., 0, :] * raw_bias))
        return gy + self.norm_self.backward(cn, gq + gkv)

    def stga_forward(self, z, g, gate=1.0):
        """Grounding attention with token selection.

        ``g`` is (N, M, grounded_width). Returns ``(z_out, cache)``; the cache
        is None when the branch was skipped (no grounded tokens or gate 0).
        """
        if g is None or g.shape[-2] == 0 or gate == 0:
            return z, None
        h, cn = self.norm_stga.forward(z)
        gp, cg = self.g_proj.forward(g)
        kv = np.concatenate([h, gp], axis=-2)
        # queries from visual rows only: identical to attending with all
        # rows and then selecting the visual outputs
        a, ca = self.stga_attn.forward(h, kv)
        t = math.tanh(float(self.gamma.data))
        coef = gate * self.beta * t
        return z + coef * a, (cn, cg, ca, a, t, gate, h.shape[-2])

    def stga_backward(self, cache, gy):
        """Returns ``(gz, gg, g_gate)``."""
        if cache is None:
            return gy, None, 0.0
        cn, cg, ca, a, t, gate, s = cache
        inner = float(np.sum(gy * a))
        self.gamma.accumulate(gate * self.beta * (1.0 - t * t) * inner)
        g_gate = self.beta * t * inner
        ga = (gate * self.beta * t) * gy
        gq, gkv, _ = self.stga_attn.backward(ca, ga)
        gh = gq + gkv[..., :s, :]
        gg = self.g_proj.backward(cg, gkv[..., s:, :])
        gz = gy + self.norm_stga.backward(cn, gh)
        return gz, gg, g_gate

    def cross_attention_forward(self, z, c):
        h, cn = self.norm_cross.forward(z)
        a, ca = self.cross_attn.forward(h, c)
        return z + a, (cn, ca)

    def cross_attention_backward(self, cache, gy):
        cn, ca = cache
        gq, _, _ = self.cross_attn.backward(ca, gy)
        return gy + self.norm_cross.backward(cn, gq)

    # composition ---------------------------------------------------------
    def forward(self, z, g, c, bias=None, gate=1.0, grounded=True):
        """``z`` (N, S, width); ``c`` (N, L, text_width) or (L, text_width).

        With ``grounded=False`` the block is the grounding-free base block
        (self-attention and cross-attention only).
        """
        if c.ndim == 2:
            c = np.broadcast_to(c, (z.shape[0],) + c.shape)
        z1, c_self = self.self_attention_forward(z, bias if grounded else None)
        c_stga = None
        if grounded:
            z1, c_stga = self.stga_forward(z1, g, gate)
        z2, c_cross = self.cross_attention_forward(z1, c)
        c_temp = None
        if grounded:
            z2, c_temp = self.temporal.forward(z2)
        return z2, (c_self, bias if grounded else None, c_stga, c_cross, c_temp)

    def backward(self, cache, gy):
        """Returns ``(gz, gg, g_gate)``."""
        c_self, bias, c_stga, c_cross, c_temp = cache
        if c_temp is not None:
            gy = self.temporal.backward(c_temp, gy)
        gy = self.cross_attention_backward(c_cross, gy)
        gy, gg, g_gate = self.stga_backward(c_stga, gy)
        gz = self.self_attention_backward(c_self, bias, gy)
        return gz, gg, g_gate


def stga(z, g_frame, block: StglBlock, gate=1.0):
    return block.stga_forward(z, g_frame, gate)[0]


def grounded_self_attention(z, bias, block: StglBlock):
    return block.self_attention_forward(z, bias)[0]


def cross_attention(z, c, block: StglBlock):
    return block.cross_attention_forward(z, c)[0]


def frame_temporal_attention(z, block: StglBlock):
    return block.temporal.forward(z)[0]


def stgl_block_forward(block: StglBlock, z, g, c, bias=None, gate=1.0, grounded=True):
    return block.forward(z, g, c, bias, gate, grounded)[0]


def _register_stga_op():
    """``stga`` grad-check op over (z, g, gamma) on a fixed small block."""
    rng = RngStream(1234, "stga-op")
    blocks = {}

    def block_for(width, gw):
        key = (width, gw)
        if key not in blocks:
            blocks[key] = StglBlock("op", width, 4, gw, rng)
        return blocks[key]

    def forward(z, g, gamma):
        b = block_for(z.shape[-1], g.shape[-1])
        b.gamma.data = np.array(float(np.reshape(gamma, -1)[0]))
        return b.stga_forward(z, g)[0]

    def backward(inputs, gout):
        z, g, gamma = inputs
        b = block_for(z.shape[-1], g.shape[-1])
        b.gamma.data = np.array(float(np.reshape(gamma, -1)[0]))
        b.zero_grad()
        _, cache = b.stga_forward(z, g)
        gz, gg, _ = b.stga_backward(cache, gout)
        if gg is None:
            gg = np.zeros_like(g)
        return [gz, gg, np.reshape(b.gamma.grad, np.shape(gamma))]

    register_op("stga", forward, backward)


_register_stga_op()
