"""Synthetic videos with matching box tracks: coloured squares drifting over
a smooth background. Stands in for a real video dataset."""
from __future__ import annotations

import numpy as np

from gvdiff.grounding import BoundingBox, GroundingTrack, TrackObject
from gvdiff.numerics import RngStream

PHRASES = ("red square", "blue square", "green square", "yellow square")


def moving_squares(num_frames, channels=4, height=16, width=16, num_objects=1, seed=0):
    """Returns ``(video (N, C, H, W) in [-1, 1], track, prompt)``."""
    rng = RngStream(seed, "synthetic")
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height,
                         (np.arange(width) + 0.5) / width, indexing="ij")
    tilt = rng.normal(channels) * 0.2
    video = np.empty((num_frames, channels, height, width))
    for c in range(channels):
        video[:, c] = -0.5 + tilt[c] * (xs - ys)
    objects = []
    for k in range(num_objects):
        size = 0.25 + 0.15 * rng.uniform_open()
        start = rng.uniform_open(2) * (1 - size)
        velocity = (rng.uniform_open(2) - 0.5) * 0.04
        colour = np.tanh(rng.normal(channels) + 0.5)
        slots = []
        for j in range(num_frames):
            x0, y0 = np.clip(start + velocity * j, 0.0, 1.0 - size)
            box = BoundingBox(float(x0), float(y0), float(x0 + size), float(y0 + size))
            inside = (xs >= box.x_min) & (xs < box.x_max) & (ys >= box.y_min) & (ys < box.y_max)
            video[j][:, inside] = colour[:, None]
            slots.append(box)
        objects.append(TrackObject(PHRASES[k % len(PHRASES)], slots))
    prompt = " and ".join("a " + o.phrase for o in objects) or "an empty scene"
    return np.clip(video, -1.0, 1.0), GroundingTrack(num_frames, objects), prompt


def clip_frames(total, clip_len=16, stride=4, start=0):
    """Frame indices of a clip sampled every ``stride`` frames."""
    idx = start + stride * np.arange(clip_len)
    if idx[-1] >= total:
        raise ValueError(f"clip of {clip_len} at stride {stride} from {start} exceeds {total} frames")
    return idx


def sample_clip(video, track, clip_len=16, stride=4, start=0):
    idx = clip_frames(video.shape[0], clip_len, stride, start)
    objects = [TrackObject(o.phrase, [o.conditions[i] for i in idx]) for o in track.objects]
    return video[idx], GroundingTrack(len(idx), objects)
