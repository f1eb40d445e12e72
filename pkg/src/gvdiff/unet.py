"""Toy Grounded-UNet: two down levels, a middle block and two up levels, each
an :class:`~gvdiff.stgl.StglBlock`, with a dynamic gate per block."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from gvdiff.dgn import LayerGate, gate_grad, sample_gate
from gvdiff.errors import GVDiffError
from gvdiff.grounding import condition_map, map_to_attention_bias
from gvdiff.nn import LayerNorm, Linear, Module, sinusoidal_embedding
from gvdiff.numerics import RngStream, gelu, gelu_backward
from gvdiff.stgl import (
    GroundedEncoder,
    HashTextEmbedder,
    StglBlock,
    TemporalAttention,
    grounding_inputs,
)

BLOCK_NAMES = ("down0", "down1", "mid", "up1", "up0")
# spatial downsampling factor of each block's resolution
BLOCK_LEVELS = (0, 1, 2, 1, 0)


@dataclass
class ModelConfig:
    channels: int = 4
    height: int = 16
    width: int = 16
    base_width: int = 16
    text_width: int = 32
    text_tokens: int = 8
    grounded_width: int = 32
    num_freqs: int = 8
    beta: float = 1.0
    bias_scale: float = 1.0
    bias_gain_init: float = 0.0
    blur_sigma: float = 1.0
    blur_radius: int = 2
    keypoint_sigma: float = 0.05
    use_gates: bool = True
    cfg_drop_grounding: bool = True
    embed_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise GVDiffError("config-shape", "latent height and width must be multiples of 4")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Conditioning:
    """Everything the network needs from a track and a prompt, precomputed.

    ``prompt`` is (N, L, text_width); ``biases[level]`` is (N, S_level) or
    None; ``text``/``coords``/``present`` feed the grounded encoder.
    """

    prompt: np.ndarray
    text: np.ndarray
    coords: np.ndarray
    present: np.ndarray
    biases: list
    null: bool = False

    @property
    def num_frames(self):
        return self.prompt.shape[0]

    @property
    def num_objects(self):
        return self.present.shape[1]

    def frames(self, start, end):
        return Conditioning(
            self.prompt[start:end], self.text[start:end], self.coords[start:end],
            self.present[start:end],
            [None if b is None else b[start:end] for b in self.biases], self.null)


class GateNoise:
    """Per-layer logistic and uniform streams for training-mode gates."""

    def __init__(self, seed, num_layers=len(BLOCK_NAMES)):
        self.eps = [RngStream(seed, f"gate-epsilon/{i}") for i in range(num_layers)]
        self.mix = [RngStream(seed, f"gate-uniform/{i}") for i in range(num_layers)]


def pool2(x, h, w):
    n, _, d = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, d).mean(axis=(2, 4)).reshape(n, -1, d)


def pool2_backward(g, h, w):
    n, _, d = g.shape
    g = g.reshape(n, h // 2, 1, w // 2, 1, d) / 4.0
    return np.broadcast_to(g, (n, h // 2, 2, w // 2, 2, d)).reshape(n, h * w, d)


def up2(x, h, w):
    """Nearest-neighbour upsample from (h, w) to (2h, 2w)."""
    n, _, d = x.shape
    x = x.reshape(n, h, 1, w, 1, d)
    return np.broadcast_to(x, (n, h, 2, w, 2, d)).reshape(n, 4 * h * w, d)


def up2_backward(g, h, w):
    n, _, d = g.shape
    return g.reshape(n, h, 2, w, 2, d).sum(axis=(2, 4)).reshape(n, h * w, d)


class GroundedUNet(Module):
    def __init__(self, config: ModelConfig | None = None, embedder=None):
        self.config = cfg = config or ModelConfig()
        self.embedder = embedder or HashTextEmbedder(cfg.text_width, cfg.embed_seed)
        rng = RngStream(cfg.init_seed, "init")
        d = cfg.base_width
        widths = (d, 2 * d, 4 * d)
        self.level_widths = widths
        self.in_proj = Linear("in_proj", cfg.channels, d, rng)
        self.time1 = Linear("time.fc1", d, d, rng)
        self.time2 = Linear("time.fc2", d, d, rng)
        self.blocks = [
            StglBlock(name, widths[lvl], cfg.text_width, cfg.grounded_width, rng,
                      beta=cfg.beta, bias_gain=cfg.bias_gain_init)
            for name, lvl in zip(BLOCK_NAMES, BLOCK_LEVELS)
        ]
        self.down_proj = [Linear("down0.proj", d, 2 * d, rng), Linear("down1.proj", 2 * d, 4 * d, rng)]
        self.up_merge = [Linear("up1.merge", 6 * d, 2 * d, rng), Linear("up0.merge", 3 * d, d, rng)]
        self.out_norm = LayerNorm("out.norm", d)
        self.out_proj = Linear("out.proj", d, cfg.channels, rng, std=0.1 / np.sqrt(d))
        self.encoder = GroundedEncoder(cfg.text_width, cfg.num_freqs, cfg.grounded_width, rng)
        self.g_temporal = TemporalAttention("grounded.temporal", cfg.grounded_width, rng, "stga")
        self.gates = [LayerGate(f"gate{i}", cfg.grounded_width, rng) for i in range(len(BLOCK_NAMES))]
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise GVDiffError("param-names", "duplicate parameter names")

    @property
    def num_gated_layers(self):
        return len(self.blocks)

    # -- state ---------------------------------------------------------------
    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, arrays):
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise GVDiffError("gvck-mismatch", f"missing {missing[:3]} unexpected {extra[:3]}")
        for name, arr in arrays.items():
            if params[name].data.shape != arr.shape:
                raise GVDiffError("gvck-mismatch", f"{name}: {arr.shape} vs {params[name].shape}")
            params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def reset_grounding(self):
        """Put the grounding sub-layers back in their identity state."""
        for b in self.blocks:
            b.gamma.data = np.array(0.0)
            b.bias_gain.data = np.array(self.config.bias_gain_init)
            b.temporal.attn.o.w.data[:] = 0.0
            b.temporal.attn.o.b.data[:] = 0.0
        self.g_temporal.attn.o.w.data[:] = 0.0
        self.g_temporal.attn.o.b.data[:] = 0.0

    # -- conditioning ----------------------------------------------------------
    def level_shape(self, level):
        return self.config.height >> level, self.config.width >> level

    def prompt_table(self, prompt, num_frames):
        """A string, an (L, dt) table or an (N, L, dt) table -> (N, L, dt)."""
        if isinstance(prompt, str):
            prompt = self.embedder.embed_prompt(prompt, self.config.text_tokens)
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.ndim == 2:
            prompt = np.broadcast_to(prompt, (num_frames,) + prompt.shape)
        if prompt.shape[0] != num_frames or prompt.shape[-1] != self.config.text_width:
            raise GVDiffError("prompt-shape", f"prompt table {prompt.shape} for {num_frames} frames")
        return prompt

    def condition(self, track, prompt, null=False):
        cfg = self.config
        n = track.num_frames
        if null:
            table = self.prompt_table("", n)
        else:
            table = self.prompt_table(prompt, n)
        text, coords, present = grounding_inputs(track, self.embedder, cfg.num_freqs)
        null_grounding = null and cfg.cfg_drop_grounding
        if null_grounding:
            present = np.zeros_like(present)
            biases = [None, None, None]
        else:
            maps = [condition_map(track, j, cfg.width, cfg.height, cfg.blur_sigma,
                                  cfg.blur_radius, cfg.keypoint_sigma) for j in range(n)]
            biases = []
            for level in range(3):
                h, w = self.level_shape(level)
                biases.append(np.stack([map_to_attention_bias(m, w, h, cfg.bias_scale) for m in maps]))
        return Conditioning(table, text, coords, present, biases, null)

    # -- forward / backward ------------------------------------------------------
    def forward(self, z, t, cond: Conditioning, mode="infer", gate_override=None,
                noise: GateNoise | None = None, grounded=True, trace=None):
        """Predict the noise in ``z`` (N, C, H, W) at timestep ``t``.

        ``gate_override`` forces every gate to that value. ``grounded=False``
        runs the grounding-free base network. Inference gate decisions are
        appended to ``trace`` when given.
        """
        cfg = self.config
        n, c, hgt, wid = z.shape
        if (c, hgt, wid) != (cfg.channels, cfg.height, cfg.width):
            raise GVDiffError("latent-shape", f"expected (*, {cfg.channels}, {cfg.height}, {cfg.width}), got {z.shape}")
        if cond.num_frames != n:
            raise GVDiffError("latent-shape", f"conditioning has {cond.num_frames} frames, latent {n}")
        x = np.ascontiguousarray(np.transpose(z, (0, 2, 3, 1))).reshape(n, hgt * wid, c)
        h, c_in = self.in_proj.forward(x)
        t1, c_t1 = self.time1.forward(sinusoidal_embedding(t, cfg.base_width))
        temb, c_t2 = self.time2.forward(gelu(t1))
        h = h + temb

        g = None
        c_enc = c_gt = None
        gate_caches = [None] * len(self.blocks)
        decisions = [None] * len(self.blocks)
        gates = [1.0] * len(self.blocks)
        if grounded:
            g0, c_enc = self.encoder.forward(cond.text, cond.coords, cond.present)
            if cond.num_objects > 0:
                g, c_gt = self.g_temporal.forward(g0)
            else:
                g = g0
            if gate_override is not None:
                gates = [float(gate_override)] * len(self.blocks)
            elif cfg.use_gates:
                if cond.num_objects > 0:
                    gate_src, c_null = g, None
                else:
                    shape = (n, 1)
                    gate_src, c_null = self.encoder.forward(
                        np.zeros(shape + (cfg.text_width,)), np.zeros(shape + (cond.coords.shape[-1],)),
                        np.zeros(shape, dtype=bool))
                for i, gate in enumerate(self.gates):
                    r, rc = gate.relevance_forward(gate_src)
                    if mode == "train":
                        dec = sample_gate(r, "train", noise.eps[i], noise.mix[i], layer=i)
                    else:
                        dec = sample_gate(r, "infer", layer=i)
                    decisions[i] = dec
                    gate_caches[i] = (rc, c_null)
                    gates[i] = dec.value
                    if trace is not None:
                        trace.append(dec)

        # skip pairing: up1 (block 3) takes down1's output, up0 (block 4) down0's
        caches = [dict() for _ in self.blocks]
        skips = {}
        sizes = [self.level_shape(lvl) for lvl in range(3)]
        for i, (block, lvl) in enumerate(zip(self.blocks, BLOCK_LEVELS)):
            hh, ww = sizes[lvl]
            if i >= 3:
                hs, ws = sizes[lvl + 1]
                up = up2(h, hs, ws)
                cat = np.concatenate([up, skips[4 - i]], axis=-1)
                h, caches[i]["merge"] = self.up_merge[i - 3].forward(cat)
                caches[i]["up"] = (up.shape[-1], hs, ws)
            bias = cond.biases[lvl] if grounded else None
            h, caches[i]["block"] = block.forward(h, g, cond.prompt, bias, gates[i], grounded)
            if i <= 1:
                skips[i] = h
                h, caches[i]["down"] = self.down_proj[i].forward(pool2(h, hh, ww))
                caches[i]["pool"] = (hh, ww)
        hn, c_on = self.out_norm.forward(h)
        y, c_out = self.out_proj.forward(hn)
        eps = np.transpose(y.reshape(n, hgt, wid, c), (0, 3, 1, 2))
        cache = dict(shape=z.shape, c_in=c_in, t1=t1, c_t1=c_t1, c_t2=c_t2, caches=caches,
                     c_on=c_on, c_out=c_out, grounded=grounded, c_enc=c_enc, c_gt=c_gt,
                     gate_caches=gate_caches, decisions=decisions, g_shape=None if g is None else g.shape)
        return eps, cache

    def backward(self, cache, geps, extra_gate_grads=None):
        """Accumulate parameter gradients for ``sum(geps * eps)``.

        ``extra_gate_grads[i]`` adds a direct gradient on gate value ``i``
        (used by the optional usage penalty).
        """
        n, c, hgt, wid = cache["shape"]
        gy = np.ascontiguousarray(np.transpose(geps, (0, 2, 3, 1))).reshape(n, hgt * wid, c)
        gh = self.out_proj.backward(cache["c_out"], gy)
        gh = self.out_norm.backward(cache["c_on"], gh)
        gg = None if cache["g_shape"] is None else np.zeros(cache["g_shape"])
        gate_grads = [0.0] * len(self.blocks)
        if extra_gate_grads is not None:
            gate_grads = [float(v) for v in extra_gate_grads]
        skip_grads = {}
        for i in reversed(range(len(self.blocks))):
            ci = cache["caches"][i]
            if "down" in ci:
                hh, ww = ci["pool"]
                gh = pool2_backward(self.down_proj[i].backward(ci["down"], gh), hh, ww)
                gh = gh + skip_grads[i]
            gh, g_blk, g_gate = self.blocks[i].backward(ci["block"], gh)
            if g_blk is not None:
                gg += g_blk
            gate_grads[i] += g_gate
            if "merge" in ci:
                dup, hs, ws = ci["up"]
                gcat = self.up_merge[i - 3].backward(ci["merge"], gh)
                skip_grads[4 - i] = gcat[..., dup:]
                gh = up2_backward(gcat[..., :dup], hs, ws)
        # gates: only the soft path carries gradient back to the relevance
        g_null = None
        for i, dec in enumerate(cache["decisions"]):
            if dec is None:
                continue
            slope = gate_grad(dec)
            if slope == 0.0 or gate_grads[i] == 0.0:
                continue
            rc, c_null = cache["gate_caches"][i]
            g_src = self.gates[i].relevance_backward(rc, gate_grads[i] * slope)
            if c_null is None:
                gg += g_src
            else:
                g_null = g_src if g_null is None else g_null + g_src
                null_cache = c_null
        if g_null is not None:
            self.encoder.backward(null_cache, g_null)
        if cache["grounded"]:
            if cache["c_gt"] is not None:
                gg = self.g_temporal.backward(cache["c_gt"], gg)
            self.encoder.backward(cache["c_enc"], gg)
        x_grad_tokens = gh
        gtemb = x_grad_tokens.sum(axis=(0, 1))
        gt1 = self.time2.backward(cache["c_t2"], gtemb)
        self.time1.backward(cache["c_t1"], gelu_backward(cache["t1"], gt1))
        gx = self.in_proj.backward(cache["c_in"], x_grad_tokens)
        return np.transpose(gx.reshape(n, hgt, wid, c), (0, 3, 1, 2))
