import numpy as np
import pytest

from gvdiff.grounding import BoundingBox, GroundingTrack, Keypoint, TrackObject
from gvdiff.numerics import RngStream
from gvdiff.unet import GroundedUNet, ModelConfig


def small_config(**kw):
    base = dict(height=8, width=8, base_width=8, text_width=16, grounded_width=16,
                num_freqs=4, text_tokens=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return GroundedUNet(small_config())


def random_box(rng):
    lo = rng.uniform_open(2) * 0.6
    size = 0.1 + rng.uniform_open(2) * 0.3
    return BoundingBox(float(lo[0]), float(lo[1]), float(lo[0] + size[0]), float(lo[1] + size[1]))


def random_track(seed, num_frames=4, num_objects=2, missing=0.2):
    rng = RngStream(seed, "test-track")
    objects = []
    for k in range(num_objects):
        slots = []
        for _ in range(num_frames):
            if rng.uniform_open() < missing:
                slots.append(None)
            elif k % 3 == 2:
                p = rng.uniform_open(2)
                slots.append(Keypoint(float(p[0]), float(p[1])))
            else:
                slots.append(random_box(rng))
        objects.append(TrackObject(f"object {k}", slots))
    return GroundingTrack(num_frames, objects)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
