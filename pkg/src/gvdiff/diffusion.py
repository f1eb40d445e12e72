"""Noise schedule, forward noising, DDIM sampling with classifier-free
guidance, and staged training of the Grounded-UNet."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gvdiff.errors import GVDiffError
from gvdiff.io import decode_checkpoint, encode_checkpoint
from gvdiff.numerics import RngStream
from gvdiff.unet import GateNoise, GroundedUNet

STAGES = ("base", "stga", "temporal", "dgn")
DEFAULT_STEPS = 25
DEFAULT_GUIDANCE = 7.5


@dataclass(eq=False)
class NoiseSchedule:
    """Linear-beta schedule; arrays are indexed by timestep with slot 0 as
    the clean state (``beta[0] = 0``, ``alpha_bar[0] = 1``)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        if not 0 <= t <= self.T:
            raise GVDiffError("timestep-range", f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])


def linear_beta_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    if not (T >= 1 and 0 < beta_start < 1 and 0 < beta_end < 1
            and (beta_start < beta_end or (T == 1 and beta_start <= beta_end))):
        raise GVDiffError("schedule-bounds", f"T={T} beta=({beta_start}, {beta_end})")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def add_noise(z0, t, eps, schedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    if np.shape(eps) != np.shape(z0):
        raise GVDiffError("noise-shape", f"{np.shape(eps)} vs {np.shape(z0)}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def predict_x0(z_t, eps, t, schedule):
    ab = schedule.alpha_bar(t)
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_step(z_t, eps, t, t_prev, schedule):
    """Deterministic DDIM update from ``t`` to ``t_prev``."""
    if not t > t_prev >= 0:
        raise GVDiffError("ddim-order", f"need t > t_prev >= 0, got {t} -> {t_prev}")
    x0 = predict_x0(z_t, eps, t, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def ddim_timesteps(T, steps):
    """``[(t, t_prev), ...]`` with uniform stride, ending at t_prev = 0."""
    if not 1 <= steps <= T:
        raise GVDiffError("ddim-order", f"{steps} steps for T={T}")
    stride = T // steps
    ts = [k * stride + 1 for k in reversed(range(steps))]
    return list(zip(ts, ts[1:] + [0]))


# -- prediction ---------------------------------------------------------------

def unet_forward(model: GroundedUNet, z_t, t, prompt, track, mode="infer", **kwargs):
    """One network evaluation from raw (prompt, track) inputs."""
    cond = model.condition(track, prompt)
    return model.forward(z_t, t, cond, mode=mode, **kwargs)[0]


def cfg_predict(model, z_t, t, cond, uncond, scale=DEFAULT_GUIDANCE, trace=None):
    """``eps_u + scale * (eps_c - eps_u)``; scales 1 and 0 need one pass."""
    if scale == 1.0:
        return model.forward(z_t, t, cond, trace=trace)[0]
    eps_u = model.forward(z_t, t, uncond)[0]
    if scale == 0.0:
        return eps_u
    eps_c = model.forward(z_t, t, cond, trace=trace)[0]
    return eps_u + scale * (eps_c - eps_u)


def sample_video(model, track, prompt, steps=DEFAULT_STEPS, scale=DEFAULT_GUIDANCE,
                 seed=0, schedule=None, context=None, trace=None):
    """DDIM sampling of a latent video with as many frames as ``track``.

    ``context`` (W, C, H, W) pins the first W frames: before each network
    call they are replaced by the context noised to the current level, and
    at the end by the context itself.
    """
    schedule = schedule or linear_beta_schedule()
    cfg = model.config
    n = track.num_frames
    shape = (n, cfg.channels, cfg.height, cfg.width)
    cond = model.condition(track, prompt)
    uncond = model.condition(track, prompt, null=True)
    z = RngStream(seed, "noise").normal(shape)
    if context is not None:
        context = np.asarray(context, dtype=np.float64)
        w = context.shape[0]
        ctx_eps = RngStream(seed, "context-noise").normal(context.shape)
    for t, t_prev in ddim_timesteps(schedule.T, steps):
        if context is not None:
            z[:w] = add_noise(context, t, ctx_eps, schedule)
        eps = cfg_predict(model, z, t, cond, uncond, scale, trace)
        z = ddim_step(z, eps, t, t_prev, schedule)
    if context is not None:
        z[:w] = context
    return z


# -- training -----------------------------------------------------------------

@dataclass
class TrainingExample:
    video: np.ndarray          # (N, C, H, W) clean latents
    track: object              # GroundingTrack
    prompt: object             # str or prompt table


def stage_mask(model, stage):
    """``{name: trainable}`` for a stage; each parameter belongs to one stage."""
    if stage not in STAGES:
        raise GVDiffError("stage", f"unknown stage {stage!r}; expected one of {STAGES}")
    return {p.name: p.group == stage for p in model.parameters()}


def apply_stage(model, stage):
    mask = stage_mask(model, stage)
    for p in model.parameters():
        p.trainable = mask[p.name]
    return mask


class SGD:
    def __init__(self, lr=0.05, usage_penalty=0.0):
        self.lr = float(lr)
        self.usage_penalty = float(usage_penalty)

    def step(self, params):
        for p in params:
            if p.trainable:
                p.data = p.data - self.lr * p.grad


class TrainRngs:
    """The streams one training run draws from."""

    def __init__(self, seed):
        self.noise = RngStream(seed, "noise")
        self.timestep = RngStream(seed, "timestep")
        self.cond_drop = RngStream(seed, "cond-drop")
        self.gates = GateNoise(seed)


def training_step(batch, model, stage, optimizer, rngs, schedule=None, cond_drop=0.1):
    """One SGD step on the mean squared noise-prediction error.

    Stage ``base`` trains the grounding-free network; ``stga`` and
    ``temporal`` run the grounded network with gates held open; ``dgn``
    samples training-mode gates. Only the stage's parameters move.
    """
    if not batch:
        raise GVDiffError("empty-batch", "training batch is empty")
    schedule = schedule or linear_beta_schedule()
    apply_stage(model, stage)
    model.zero_grad()
    grounded = stage != "base"
    total = 0.0
    for ex in batch:
        t = int(rngs.timestep.integers(1, schedule.T + 1))
        eps = rngs.noise.normal(ex.video.shape)
        z_t = add_noise(ex.video, t, eps, schedule)
        null = bool(rngs.cond_drop.uniform_open() < cond_drop)
        cond = model.condition(ex.track, ex.prompt, null=null)
        if stage == "dgn":
            pred, cache = model.forward(z_t, t, cond, mode="train", noise=rngs.gates)
        else:
            pred, cache = model.forward(z_t, t, cond, gate_override=1.0, grounded=grounded)
        diff = pred - eps
        loss = float(np.mean(diff * diff))
        extra = None
        if stage == "dgn" and optimizer.usage_penalty:
            decs = [d for d in cache["decisions"] if d is not None]
            loss += optimizer.usage_penalty * sum(d.value for d in decs) / max(1, len(decs))
            extra = [optimizer.usage_penalty / max(1, len(decs)) / len(batch)] * len(decs)
        total += loss
        model.backward(cache, 2.0 * diff / (diff.size * len(batch)), extra)
    optimizer.step(model.parameters())
    return total / len(batch)


def evaluation_loss(model, batch, seed=0, schedule=None, num_draws=4, stage="base"):
    """Mean noise-prediction error over a fixed set of (t, eps) draws."""
    schedule = schedule or linear_beta_schedule()
    rng_t = RngStream(seed, "eval-timestep")
    rng_e = RngStream(seed, "eval-noise")
    total, count = 0.0, 0
    for ex in batch:
        cond = model.condition(ex.track, ex.prompt)
        for _ in range(num_draws):
            t = int(rng_t.integers(1, schedule.T + 1))
            eps = rng_e.normal(ex.video.shape)
            pred, _ = model.forward(add_noise(ex.video, t, eps, schedule), t, cond,
                                    gate_override=1.0, grounded=stage != "base")
            total += float(np.mean((pred - eps) ** 2))
            count += 1
    return total / count


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model, path):
    Path(path).write_bytes(encode_checkpoint(model.state_dict()))


def load_checkpoint(model, path):
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise GVDiffError("missing-file", str(path)) from None
    model.load_state_dict(decode_checkpoint(data))
    return model
