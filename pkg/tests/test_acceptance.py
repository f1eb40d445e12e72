"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even with
output capture on) or directly with ``python tests/test_acceptance.py``.
"""
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_track  # noqa: E402
from gvdiff.dgn import LayerGate, sample_gate  # noqa: E402
from gvdiff.diffusion import (  # noqa: E402
    SGD,
    STAGES,
    TrainingExample,
    TrainRngs,
    add_noise,
    ddim_step,
    evaluation_loss,
    linear_beta_schedule,
    load_checkpoint,
    sample_video,
    save_checkpoint,
    stage_mask,
    training_step,
)
from gvdiff.errors import GVDiffError  # noqa: E402
from gvdiff.grounding import (  # noqa: E402
    GaussianParams,
    gaussian_density,
    parse_condition_file,
    serialize_track,
)
from gvdiff.io import (  # noqa: E402
    decode_checkpoint,
    decode_grid,
    encode_checkpoint,
    encode_grid,
    read_video,
    write_video,
)
from gvdiff.numerics import RngStream, attention_weights, grad_check, scaled_dot_attention, sigmoid  # noqa: E402
from gvdiff.pipeline import (  # noqa: E402
    GenerationPlan,
    build_prompt_schedule,
    condition_similarity,
    generate_long_range,
    object_composite,
    prompt_consistency,
    temporal_consistency,
)
from gvdiff.stgl import HashTextEmbedder  # noqa: E402
from gvdiff.synthetic import moving_squares  # noqa: E402
from gvdiff.unet import GroundedUNet, ModelConfig  # noqa: E402


class Report:
    """Collects named sub-checks; ``ok`` only if all pass."""

    def __init__(self):
        self.items = []

    def check(self, name, ok, detail=""):
        self.items.append((name, bool(ok), detail))

    @property
    def ok(self):
        return all(ok for _, ok, _ in self.items)

    def summary(self):
        failed = [f"{n} ({d})" for n, ok, d in self.items if not ok]
        if failed:
            return "failed: " + "; ".join(failed)
        return "; ".join(f"{n} {d}".strip() for n, _, d in self.items)


def _randn(rng, *shape):
    return rng.normal(shape)


# -- 1. gradient suite ----------------------------------------------------------

def criterion_gradients():
    rep = Report()
    r = RngStream(101, "acceptance-grad")
    cases = {
        "softmax": lambda: [_randn(r, int(r.integers(2, 9)))],
        "attention": lambda: [_randn(r, 3, 4), _randn(r, 5, 4), _randn(r, 5, 3)],
        "attention+bias": lambda: [_randn(r, 3, 4), _randn(r, 5, 4), _randn(r, 5, 3), _randn(r, 3, 5) * 2],
        "mlp": lambda: [_randn(r, 3, 4), _randn(r, 4, 8), _randn(r, 8), _randn(r, 8, 2), _randn(r, 2)],
        "layer_norm": lambda: [_randn(r, 3, 6), _randn(r, 6), _randn(r, 6)],
        "stga": lambda: [_randn(r, 2, 4, 8), _randn(r, 2, 3, 6), _randn(r, 1)],
        "soft_gate": lambda: [_randn(r, 4) * 2, r.logistic(4)],
    }
    for name, make in cases.items():
        op = "attention" if name.startswith("attention") else name
        worst = max(grad_check(op, make(), seed=k) for k in range(100))
        rep.check(name, worst < 1e-4, f"max={worst:.1e}")
    return rep, 60.0


# -- 2. identity at initialization ----------------------------------------------

def criterion_identity():
    rep = Report()
    worst = 0.0
    r = RngStream(202, "acceptance-identity")
    for k in range(50):
        if k % 10 == 0:
            # fresh model (new base weights) every 10 pairs
            model = GroundedUNet(ModelConfig(init_seed=k))
        n = int(r.integers(1, 9))
        z = r.normal((n, 4, 16, 16))
        t = int(r.integers(1, 1001))
        track = random_track(1000 + k, num_frames=n, num_objects=int(r.integers(0, 4)))
        cond = model.condition(track, f"prompt {k}")
        grounded, _ = model.forward(z, t, cond)
        base, _ = model.forward(z, t, cond, grounded=False)
        worst = max(worst, float(np.max(np.abs(grounded - base))))
    rep.check("50 pairs", worst <= 1e-12, f"max|diff|={worst:.1e}")
    return rep, 30.0


# -- 3. grounding-bias laws -------------------------------------------------------

def criterion_bias_laws():
    rep = Report()
    r = RngStream(303, "acceptance-bias")
    worst = 0.0
    for _ in range(100):
        q, k, v = r.normal((6, 4)), r.normal((9, 4)), r.normal((9, 3))
        c = float(r.normal() * 20)
        diff = scaled_dot_attention(q, k, v, np.full(9, c)) - scaled_dot_attention(q, k, v)
        worst = max(worst, float(np.abs(diff).max()))
    rep.check("constant-bias invariance", worst <= 1e-10, f"max={worst:.1e}")
    monotone = 0
    for _ in range(100):
        q, k = r.normal((6, 4)), r.normal((9, 4))
        bias = r.normal(9)
        j = int(r.integers(0, 9))
        bumped = bias.copy()
        bumped[j] += float(r.uniform_open()) * 5 + 1e-3
        monotone += bool(np.all(attention_weights(q, k, bumped)[:, j] > attention_weights(q, k, bias)[:, j]))
    rep.check("monotonicity", monotone == 100, f"{monotone}/100")
    p = GaussianParams(0.4, 0.6, 0.1, 0.07)
    peak = float(gaussian_density(p, p.mu_x, p.mu_y))
    err_peak = abs(peak - 1 / (2 * math.pi * p.sigma_x * p.sigma_y))
    rep.check("peak 1/(2 pi sx sy)", err_peak <= 1e-9, f"err={err_peak:.1e}")
    ratio_x = float(gaussian_density(p, p.mu_x + p.sigma_x, p.mu_y)) / peak
    ratio_y = float(gaussian_density(p, p.mu_x, p.mu_y - p.sigma_y)) / peak
    err_ratio = max(abs(ratio_x - math.exp(-0.5)), abs(ratio_y - math.exp(-0.5)))
    rep.check("one-sigma ratio", err_ratio <= 1e-9, f"err={err_ratio:.1e}")
    return rep, None


# -- 4. gate law ------------------------------------------------------------------

def criterion_gate_law():
    rep = Report()
    draws = 100_000
    for i, r_val in enumerate((-2.0, -0.5, 0.0, 0.5, 2.0)):
        eps, mix = RngStream(404, f"gate-epsilon/{i}"), RngStream(404, f"gate-uniform/{i}")
        hard = sum(sample_gate(r_val, "train", eps, mix).hard for _ in range(draws))
        mean = hard / draws
        p = float(sigmoid(r_val))
        se = math.sqrt(p * (1 - p) / draws)
        rep.check(f"r={r_val:+}", abs(mean - p) <= 3 * se, f"z={(mean - p) / se:+.2f}")
    model = GroundedUNet(ModelConfig(height=8, width=8, base_width=8))
    rng = np.random.default_rng(4)
    for p in model.parameters():
        if p.group in ("dgn", "stga"):
            p.data = np.array(rng.normal(size=np.shape(p.data)))
    track = random_track(7, num_frames=4)
    runs = []
    for _ in range(10):
        trace = []
        sample_video(model, track, "a cat", steps=3, seed=0, trace=trace)
        runs.append(tuple((d.layer, d.hard) for d in trace))
    skipped = sorted({layer for layer, hard in runs[0] if hard == 0})
    rep.check("infer determinism", len(set(runs)) == 1, f"10 runs, skipped layers {skipped}")
    return rep, 20.0


# -- 5. DDIM oracle ---------------------------------------------------------------------

def criterion_ddim():
    rep = Report()
    s = linear_beta_schedule()
    r = RngStream(505, "acceptance-ddim")
    worst = 0.0
    for _ in range(100):
        z0 = r.normal((2, 4, 4, 4))
        eps = r.normal(z0.shape)
        t = int(r.integers(1, 1001))
        rec = ddim_step(add_noise(z0, t, eps, s), eps, t, 0, s)
        worst = max(worst, float(np.abs(rec - z0).max()))
    rep.check("inversion", worst <= 1e-8, f"max={worst:.1e}")
    model = GroundedUNet()
    _, track, prompt = moving_squares(8)
    with tempfile.TemporaryDirectory() as d:
        blobs, videos = [], []
        for k in range(2):
            v = sample_video(model, track, prompt, steps=25, scale=7.5, seed=1234)
            write_video(Path(d) / f"{k}.gvdm", v)
            blobs.append((Path(d) / f"{k}.gvdm").read_bytes())
            videos.append(v)
    rep.check("25-step determinism", np.array_equal(videos[0], videos[1]) and blobs[0] == blobs[1],
              f"GVDM {len(blobs[0])} bytes identical")
    return rep, None


# -- 6. training sanity ------------------------------------------------------------------

def criterion_training():
    rep = Report()
    model = GroundedUNet()
    data = [TrainingExample(*moving_squares(8, seed=s)) for s in range(4)]
    opt, rngs = SGD(0.1), TrainRngs(0)
    # step-1 value measured on a fixed set of (t, eps) draws so that the
    # comparison is not dominated by which timesteps happen to be sampled
    start = evaluation_loss(model, data)
    first = None
    for _ in range(200):
        loss = training_step(data, model, "base", opt, rngs)
        first = loss if first is None else first
    end = evaluation_loss(model, data)
    rep.check("overfit", end < 0.5 * start,
              f"eval {start:.3f} -> {end:.3f} ({100 * end / start:.0f}%), first train step {first:.3f}")
    frozen_ok = []
    for stage in STAGES:
        m = GroundedUNet(ModelConfig(height=8, width=8, base_width=8))
        rng = np.random.default_rng(1)
        for p in m.parameters():
            if p.group != "base":
                p.data = np.array(rng.normal(size=np.shape(p.data)) * 0.3)
        small = [TrainingExample(*moving_squares(2, 4, 8, 8, seed=s)) for s in range(2)]
        before = {p.name: p.data.copy() for p in m.parameters()}
        mask = stage_mask(m, stage)
        r = TrainRngs(3)
        for _ in range(10):
            training_step(small, m, stage, SGD(0.05), r)
        frozen_ok.append(all(np.array_equal(p.data, before[p.name])
                             for p in m.parameters() if not mask[p.name]))
    rep.check("stage freezing", all(frozen_ok), f"{sum(frozen_ok)}/{len(STAGES)} stages bit-stable")
    return rep, 300.0


# -- 7. application contracts -------------------------------------------------------

class _Vectors:
    def __init__(self, frames, text=None):
        self.frames, self.text = frames, text

    def embed_frame(self, frame):
        return np.asarray(self.frames[int(np.asarray(frame).flat[0])], dtype=float)

    def embed_text(self, prompt):
        return np.asarray(self.text, dtype=float)


def criterion_applications():
    rep = Report()
    model = GroundedUNet(ModelConfig(height=8, width=8, base_width=8))
    track = random_track(3, num_frames=24)
    plan = GenerationPlan(24, 8)
    out = generate_long_range(model, track, "a cat", plan, seed=5, steps=3)
    chunk1 = sample_video(model, track.slice(0, 16), model.prompt_table("a cat", 16), 3, seed=5)
    rep.check("long-range overlap", np.array_equal(out[8:16], chunk1[8:16]), "frames 8-15 bit-identical")

    emb = HashTextEmbedder(16)
    sched = build_prompt_schedule([(0, "a cat"), (10, "a dog")], emb, 16, 4)
    e0, e10 = emb.embed_prompt("a cat", 4), emb.embed_prompt("a dog", 4)
    exact = np.array_equal(sched.table[0], e0) and np.array_equal(sched.table[10], e10)
    mid = float(np.abs(sched.table[5] - (0.5 * e0 + 0.5 * e10)).max())
    rep.check("prompt schedule", exact and mid <= 1e-12, f"keyframes exact, midpoint err {mid:.1e}")

    r = np.random.default_rng(7)
    bg, gen = r.normal(size=(3, 2, 6, 6)), r.normal(size=(3, 2, 6, 6))
    half = np.zeros((3, 6, 6))
    half[:, :, :3] = 1
    m = (r.random((3, 6, 6)) > 0.5).astype(float)
    comp = object_composite(bg, gen, half)
    ok = (np.array_equal(object_composite(bg, gen, np.ones((3, 6, 6))), gen)
          and np.array_equal(object_composite(bg, gen, np.zeros((3, 6, 6))), bg)
          and np.array_equal(comp[..., :3], gen[..., :3]) and np.array_equal(comp[..., 3:], bg[..., 3:])
          and np.array_equal(object_composite(bg, object_composite(bg, gen, m), m), object_composite(bg, gen, m)))
    rep.check("composite algebra", ok)

    frames = np.stack([np.full((1, 2, 2), float(i)) for i in range(4)])
    sixty = {i: [math.cos(i * math.pi / 3), math.sin(i * math.pi / 3)] for i in range(4)}
    ortho = {0: [1, 0], 1: [0, 1], 2: [1, 0], 3: [0, 1]}
    same = {i: [0.3, -1.2, 2.0] for i in range(4)}
    vals = [
        temporal_consistency(frames, _Vectors(same)) - 100,
        temporal_consistency(frames, _Vectors(ortho)),
        temporal_consistency(frames, _Vectors(sixty)) - 50,
        prompt_consistency(frames, "p", _Vectors(same, [0.3, -1.2, 2.0])) - 100,
        prompt_consistency(frames, "p", _Vectors({i: [1, 0] for i in range(4)}, [0, 1])),
        condition_similarity(track, track) - 100,
        condition_similarity([np.eye(2)[0]] * 2, [np.eye(2)[1]] * 2),
    ]
    err = max(abs(v) for v in vals)
    rep.check("metric anchors", err <= 1e-9, f"max err {err:.1e}")
    return rep, None


# -- 8. formats ----------------------------------------------------------------------

def _raises(code, fn, *args):
    try:
        fn(*args)
    except GVDiffError as exc:
        return exc.code == code
    return False


def criterion_formats():
    rep = Report()
    track = random_track(8, num_frames=5, num_objects=3)
    text = serialize_track(track)
    again = parse_condition_file(text)
    rep.check("track JSON", again == track and serialize_track(again) == text)

    grid = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
    data = encode_grid(grid)
    rep.check("GVDM", np.array_equal(decode_grid(data), grid) and encode_grid(decode_grid(data)) == data)

    with tempfile.TemporaryDirectory() as d:
        model = GroundedUNet(ModelConfig(height=8, width=8, base_width=8))
        save_checkpoint(model, Path(d) / "a.gvck")
        other = GroundedUNet(ModelConfig(height=8, width=8, base_width=8, init_seed=3))
        load_checkpoint(other, Path(d) / "a.gvck")
        save_checkpoint(other, Path(d) / "b.gvck")
        ck_ok = (Path(d) / "a.gvck").read_bytes() == (Path(d) / "b.gvck").read_bytes()
        v = np.random.default_rng(1).normal(size=(2, 3, 4, 4)).astype(np.float32).astype(np.float64)
        write_video(Path(d) / "v.gvdm", v)
        ck_ok &= np.array_equal(read_video(Path(d) / "v.gvdm"), v)
    rep.check("GVCK", ck_ok)

    ck = encode_checkpoint({"w": np.ones(3)})
    errors = [
        _raises("track-parse", parse_condition_file, b"{not json"),
        _raises("track-range", parse_condition_file,
                b'{"num_frames": 1, "objects": [{"phrase": "a", "boxes": [[0, 0, 1.2, 0.5]]}]}'),
        _raises("track-frames", parse_condition_file,
                b'{"num_frames": 4, "objects": [{"phrase": "a", "boxes": [null, null, null]}]}'),
        _raises("degenerate-box", parse_condition_file,
                b'{"num_frames": 1, "objects": [{"phrase": "a", "boxes": [[0.3, 0.3, 0.3, 0.7]]}]}'),
        _raises("gvdm-format", decode_grid, data[:-1]),
        _raises("gvdm-format", decode_grid, b"XXXX" + data[4:]),
        _raises("gvck-format", decode_checkpoint, ck[:-1]),
        _raises("gvck-format", decode_checkpoint, b"XXXX" + ck[4:]),
    ]
    rep.check("named errors", all(errors), f"{sum(errors)}/{len(errors)}")
    return rep, None


CRITERIA = [
    (1, "gradient suite", criterion_gradients),
    (2, "identity at initialization", criterion_identity),
    (3, "grounding-bias laws", criterion_bias_laws),
    (4, "gate law", criterion_gate_law),
    (5, "DDIM oracle", criterion_ddim),
    (6, "training sanity", criterion_training),
    (7, "application contracts", criterion_applications),
    (8, "format round-trips", criterion_formats),
]


def run_criterion(fn):
    t0 = time.perf_counter()
    rep, limit = fn()
    elapsed = time.perf_counter() - t0
    if limit is not None:
        rep.check("runtime", elapsed < limit, f"{elapsed:.1f}s < {limit:.0f}s")
    return rep, elapsed


def _line(num, title, rep, elapsed):
    status = "PASS" if rep.ok else "FAIL"
    return f"[{status}] criterion {num} {title} ({elapsed:.1f}s): {rep.summary()}"


@pytest.mark.parametrize("num,title,fn", CRITERIA, ids=[f"c{n}-{t.replace(' ', '-')}" for n, t, _ in CRITERIA])
def test_criterion(num, title, fn, capsys):
    rep, elapsed = run_criterion(fn)
    with capsys.disabled():
        print("\n" + _line(num, title, rep, elapsed))
    assert rep.ok, rep.summary()


if __name__ == "__main__":
    results = []
    for num, title, fn in CRITERIA:
        rep, elapsed = run_criterion(fn)
        print(_line(num, title, rep, elapsed), flush=True)
        results.append(rep.ok)
    sys.exit(0 if all(results) else 1)
