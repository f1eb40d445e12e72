"""Dynamic gate network: decides per layer whether grounding attention runs.

For gated layer ``i`` a learned embedding ``v_i`` attends over the
frame-pooled grounded tokens; the attended vector goes through a small
low-rank MLP to give a relevance ``r_i``. Gates are drawn from
``r_i + Logistic(0, 1)`` noise: a soft gate ``sigmoid(r_hat)`` and a hard
gate ``1[r_hat >= 0]``, mixed by a uniform coin during training. Inference
uses the noiseless hard gate only, skipping the layer when it is 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from gvdiff.errors import GVDiffError
from gvdiff.nn import Linear, Module
from gvdiff.numerics import (
    Parameter,
    gelu,
    gelu_backward,
    register_op,
    sigmoid,
    softmax,
    softmax_backward,
)


@dataclass
class GateDecision:
    layer: int
    relevance: float
    noised: float
    soft: float
    hard: int
    mix: float | None
    value: float
    mode: str

    @property
    def uses_soft(self):
        return self.mode == "train" and self.mix is not None and self.mix >= 0.5

    @property
    def skipped(self):
        return self.hard == 0


@dataclass
class SkipReport:
    rows: list  # (layer_index, skip_percent, samples)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_index", "skip_percent", "samples"])
        for layer, pct, n in self.rows:
            w.writerow([layer, f"{pct:.6g}", n])
        return buf.getvalue()


def low_rank_width(grounded_width):
    return max(4, grounded_width // 8)


class LayerGate(Module):
    """Embedding ``v_i`` plus a ``d -> d/8 -> 1`` MLP for one gated layer."""

    def __init__(self, name, grounded_width, rng, group="dgn"):
        r = low_rank_width(grounded_width)
        self.v = Parameter(name + ".v", rng.spawn(name + ".v").normal(grounded_width) * 0.1, group)
        self.fc1 = Linear(name + ".fc1", grounded_width, r, rng, group)
        self.fc2 = Linear(name + ".fc2", r, 1, rng, group)

    def relevance_forward(self, g):
        """``g`` is (N, M, d). Returns ``(r, cache)``."""
        if g.shape[1] == 0:
            raise GVDiffError("gate-objects", "relevance needs at least one grounded token")
        p = g.mean(axis=0)                      # (M, d)
        alpha = softmax(p @ self.v.data)        # (M,)
        s = alpha @ p                           # (d,)
        h, c1 = self.fc1.forward(s)
        out, c2 = self.fc2.forward(gelu(h))
        return float(out[0]), (g.shape[0], p, alpha, h, c1, c2)

    def relevance_backward(self, cache, gr):
        """Returns the gradient with respect to ``g``."""
        n, p, alpha, h, c1, c2 = cache
        ga = self.fc2.backward(c2, np.array([gr]))
        gs = self.fc1.backward(c1, gelu_backward(h, ga))
        galpha = p @ gs
        gp = np.outer(alpha, gs)
        glogits = softmax_backward(alpha, galpha)
        self.v.accumulate(glogits @ p)
        gp = gp + np.outer(glogits, self.v.data)
        return np.broadcast_to(gp / n, (n,) + gp.shape).copy()


def relevance(gate: LayerGate, g):
    return gate.relevance_forward(g)[0]


def sample_gate(r, mode, eps_rng=None, mix_rng=None, layer=0, eps=None, mix=None):
    """One gate draw.

    ``mode="infer"`` is deterministic (no noise, hard gate). In ``"train"``
    mode ``eps`` and ``mix`` default to draws from the given streams; pass
    them explicitly to pin the noise.
    """
    r = float(r)
    if mode == "infer":
        hard = int(r >= 0.0)
        return GateDecision(layer, r, r, float(sigmoid(r)), hard, None, float(hard), mode)
    if mode != "train":
        raise GVDiffError("gate-mode", f"unknown gate mode {mode!r}")
    if eps is None:
        eps = float(eps_rng.logistic())
    if mix is None:
        mix = float(mix_rng.uniform_open())
    noised = r + eps
    soft = float(sigmoid(noised))
    hard = int(noised >= 0.0)
    value = soft if mix >= 0.5 else float(hard)
    return GateDecision(layer, r, noised, soft, hard, mix, value, mode)


def gate_grad(decision: GateDecision):
    """d(value)/d(relevance): the soft path's logistic slope, 0 on the hard path."""
    if decision.uses_soft:
        return decision.soft * (1.0 - decision.soft)
    return 0.0


def collect_skip_stats(trace, num_layers=None):
    """Percent of inference decisions per layer with a closed hard gate."""
    decisions = [d for d in trace if d.mode == "infer"]
    if not decisions:
        raise GVDiffError("empty-trace", "no inference-mode gate decisions")
    if num_layers is None:
        num_layers = max(d.layer for d in decisions) + 1
    skipped = np.zeros(num_layers, dtype=np.int64)
    total = np.zeros(num_layers, dtype=np.int64)
    for d in decisions:
        total[d.layer] += 1
        skipped[d.layer] += d.hard == 0
    rows = [(i, 100.0 * skipped[i] / total[i] if total[i] else 0.0, int(total[i]))
            for i in range(num_layers)]
    return SkipReport(rows)


TRACE_FIELDS = ("layer", "relevance", "noised", "soft", "hard", "mix", "value", "mode")


def trace_to_csv(trace):
    """Gate decisions as CSV; floats use ``repr`` so they read back exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for d in trace:
        w.writerow([d.layer, repr(d.relevance), repr(d.noised), repr(d.soft), d.hard,
                    "" if d.mix is None else repr(d.mix), repr(d.value), d.mode])
    return buf.getvalue()


def trace_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRACE_FIELDS:
        raise GVDiffError("trace-format", "gate trace header missing or wrong")
    out = []
    for i, r in enumerate(rows[1:], 2):
        try:
            out.append(GateDecision(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4]),
                                    None if r[5] == "" else float(r[5]), float(r[6]), r[7]))
        except (IndexError, ValueError):
            raise GVDiffError("trace-format", f"line {i}: cannot parse {r}") from None
    return out


def _soft_gate_forward(r, eps):
    return sigmoid(r + eps)


def _soft_gate_backward(inputs, gout):
    s = sigmoid(inputs[0] + inputs[1])
    g = gout * s * (1 - s)
    return [g, g]


register_op("soft_gate", _soft_gate_forward, _soft_gate_backward)
