"""Application layer: prompt schedules, long-range generation, object
compositing and the consistency metrics used to score generated videos."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from gvdiff.diffusion import DEFAULT_GUIDANCE, DEFAULT_STEPS, sample_video
from gvdiff.errors import GVDiffError
from gvdiff.grounding import GroundingTrack, condition_map
from gvdiff.numerics import RngStream

DEFAULT_CHUNK = 16


# -- prompt schedules -----------------------------------------------------------

@dataclass
class PromptSchedule:
    keyframes: list            # [(frame, prompt), ...] strictly increasing, first at 0
    table: np.ndarray          # (N, tokens, width)

    @property
    def num_frames(self):
        return self.table.shape[0]


def build_prompt_schedule(keyframes, embedder, num_frames, num_tokens=8):
    """Per-frame prompt tables, linearly interpolated between keyframes.

    ``keyframes`` is a list of ``(frame, prompt)``; ``embedder`` needs
    ``embed_prompt(prompt, num_tokens)``. Frames after the last keyframe keep
    its table. Keyframe rows are copied, not recomputed.
    """
    keyframes = [(int(f), p) for f, p in keyframes]
    if not keyframes:
        raise GVDiffError("schedule-start", "a prompt schedule needs at least one keyframe")
    frames = [f for f, _ in keyframes]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise GVDiffError("schedule-order", f"keyframes must be strictly increasing: {frames}")
    if frames[0] != 0:
        raise GVDiffError("schedule-start", f"first keyframe is at frame {frames[0]}, not 0")
    if frames[-1] >= num_frames:
        raise GVDiffError("schedule-order", f"keyframe {frames[-1]} beyond {num_frames} frames")
    embs = [np.asarray(embedder.embed_prompt(p, num_tokens), dtype=np.float64) for _, p in keyframes]
    table = np.empty((num_frames,) + embs[0].shape)
    for i, (a, ea) in enumerate(zip(frames, embs)):
        if i + 1 < len(frames):
            b, eb = frames[i + 1], embs[i + 1]
            for j in range(a + 1, b):
                w = (j - a) / (b - a)
                table[j] = (1.0 - w) * ea + w * eb
            table[a] = ea
        else:
            table[a:] = ea
    return PromptSchedule(keyframes, table)


# -- long-range generation ----------------------------------------------------------

@dataclass
class GenerationPlan:
    """Chunks ``[start, end)``; each later chunk reuses the previous
    chunk's last ``window`` frames as its context."""

    total: int
    window: int
    chunk: int = DEFAULT_CHUNK
    chunks: list = field(default_factory=list)

    def __post_init__(self):
        if self.window >= self.chunk:
            raise GVDiffError("window-too-large",
                              f"context window {self.window} must be smaller than chunk {self.chunk}")
        if self.total < 1 or self.window < 0:
            raise GVDiffError("plan-coverage", f"total={self.total} window={self.window}")
        if not self.chunks:
            self.chunks = plan_chunks(self.total, self.chunk, self.window)
        self.validate()

    def validate(self):
        c = self.chunks
        if not c or c[0][0] != 0 or c[-1][1] != self.total:
            raise GVDiffError("plan-coverage", f"chunks {c} do not cover [0, {self.total})")
        for s, e in c:
            if not 0 < e - s <= self.chunk:
                raise GVDiffError("plan-coverage", f"chunk [{s}, {e}) has bad length")
        for (s0, e0), (s1, e1) in zip(c, c[1:]):
            if e0 - s1 != self.window or e1 <= e0:
                raise GVDiffError("plan-coverage",
                                  f"chunks [{s0}, {e0}) and [{s1}, {e1}) must overlap by {self.window}")

    def context(self, index):
        """Context frame range of chunk ``index`` (empty for the first)."""
        s = self.chunks[index][0]
        return (s, s) if index == 0 else (s, s + self.window)


def plan_chunks(total, chunk=DEFAULT_CHUNK, window=0):
    chunks = [(0, min(chunk, total))]
    while chunks[-1][1] < total:
        start = chunks[-1][1] - window
        chunks.append((start, min(start + chunk, total)))
    return chunks


def chunk_seed(seed, index):
    """Chunk 0 uses ``seed`` itself so a one-chunk plan matches plain sampling."""
    if index == 0:
        return int(seed)
    return int(RngStream(seed, f"chunk/{index}").integers(0, 2 ** 62))


def generate_long_range(model, track, schedule, plan, seed=0, steps=DEFAULT_STEPS,
                        scale=DEFAULT_GUIDANCE, noise_schedule=None, trace=None):
    """Auto-regressive sampling chunk by chunk.

    ``schedule`` is a :class:`PromptSchedule`, a prompt string or a prompt
    table. Every chunk after the first pins its first ``plan.window`` frames
    to the previous output (replacement conditioning), so overlapping frames
    are identical in the stitched result.
    """
    if track.num_frames != plan.total:
        raise GVDiffError("plan-coverage", f"track has {track.num_frames} frames, plan {plan.total}")
    if isinstance(schedule, PromptSchedule):
        if schedule.num_frames != plan.total:
            raise GVDiffError("plan-coverage", f"schedule has {schedule.num_frames} rows, plan {plan.total}")
        prompt = schedule.table
    else:
        prompt = model.prompt_table(schedule, plan.total)
    cfg = model.config
    out = np.zeros((plan.total, cfg.channels, cfg.height, cfg.width))
    for i, (s, e) in enumerate(plan.chunks):
        cs, ce = plan.context(i)
        context = out[cs:ce].copy() if ce > cs else None
        out[s:e] = sample_video(model, track.slice(s, e), prompt[s:e], steps, scale,
                                chunk_seed(seed, i), noise_schedule, context, trace)
    return out


# -- compositing ---------------------------------------------------------------

def object_composite(background, generated, mask):
    """``mask * generated + (1 - mask) * background`` for a binary mask.

    ``mask`` is (N, H, W) and broadcasts over channels of (N, C, H, W) videos.
    """
    background = np.asarray(background, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    mask = np.asarray(mask)
    if background.shape != generated.shape or background.ndim != 4 \
            or mask.shape != (background.shape[0],) + background.shape[2:]:
        raise GVDiffError("composite-shape",
                          f"background {background.shape}, generated {generated.shape}, mask {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise GVDiffError("mask-values", "composite mask must be 0/1")
    # selection rather than arithmetic keeps each pixel bit-exact
    return np.where(mask[:, None].astype(bool), generated, background)


# -- embedders and metrics -------------------------------------------------------------

class StubEmbedder:
    """Deterministic stand-in for an image/text embedding model.

    Frames go through a fixed Gaussian random projection; text uses one
    Gaussian vector per string. Both outputs are unit-normalized.
    """

    def __init__(self, width=64, seed=0):
        self.width = int(width)
        self.seed = int(seed)
        self._proj = {}

    def _projection(self, size):
        p = self._proj.get(size)
        if p is None:
            p = RngStream(self.seed, f"frame-projection/{size}").normal((self.width, size))
            self._proj[size] = p
        return p

    @staticmethod
    def _unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def embed_frame(self, frame):
        x = np.asarray(frame, dtype=np.float64).ravel()
        return self._unit(self._projection(x.size) @ x)

    def embed_text(self, text):
        return self._unit(RngStream(self.seed, "text:" + text).normal(self.width))


def cosine(a, b):
    """Cosine similarity; 1 when both vectors are zero, 0 when only one is."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0.0 or bb == 0.0:
        return 1.0 if aa == bb else 0.0
    # sqrt(aa * bb) rather than |a||b| so identical inputs give exactly 1
    return float(np.clip((a @ b) / np.sqrt(aa * bb), -1.0, 1.0))


def temporal_consistency(video, embedder, all_pairs=False):
    """100 x mean cosine between embeddings of adjacent frames (or all pairs)."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise GVDiffError("tc-frames", f"need at least 2 frames, got {video.shape[0]}")
    embs = [embedder.embed_frame(f) for f in video]
    if all_pairs:
        pairs = [(i, j) for i in range(len(embs)) for j in range(i + 1, len(embs))]
    else:
        pairs = [(i, i + 1) for i in range(len(embs) - 1)]
    return 100.0 * float(np.mean([cosine(embs[i], embs[j]) for i, j in pairs]))


def prompt_consistency(video, prompt, embedder):
    """100 x mean cosine between each frame embedding and the prompt embedding."""
    video = np.asarray(video)
    if video.shape[0] < 1:
        raise GVDiffError("pc-frames", "need at least 1 frame")
    text = embedder.embed_text(prompt)
    return 100.0 * float(np.mean([cosine(embedder.embed_frame(f), text) for f in video]))


def _condition_maps(source, width, height):
    if isinstance(source, GroundingTrack):
        return [condition_map(source, j, width, height).grid for j in range(source.num_frames)]
    return [np.asarray(m, dtype=np.float64) for m in source]


def condition_similarity(source, generated, width=16, height=16):
    """100 x mean per-frame cosine between condition maps.

    Arguments are tracks (rendered to grounding maps at ``width`` x
    ``height``) or sequences of per-frame maps from any extractor.
    """
    a = _condition_maps(source, width, height)
    b = _condition_maps(generated, width, height)
    if len(a) != len(b) or not a:
        raise GVDiffError("cond-frames", f"{len(a)} vs {len(b)} frames")
    return 100.0 * float(np.mean([cosine(x, y) for x, y in zip(a, b)]))


def metrics_csv(values):
    """``metric,value`` rows in insertion order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in values.items():
        w.writerow([k, repr(float(v))])
    return buf.getvalue()
