import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvdiff.diffusion import load_checkpoint, save_checkpoint
from gvdiff.errors import GVDiffError
from gvdiff.grounding import DenseMap, load_track, serialize_track
from gvdiff.io import (
    decode_checkpoint,
    decode_grid,
    encode_checkpoint,
    encode_grid,
    read_dense_map,
    read_mask,
    read_video,
    write_dense_map,
    write_mask,
    write_video,
)
from gvdiff.unet import GroundedUNet

from conftest import random_track, small_config


def _code(fn, *a):
    with pytest.raises(GVDiffError) as exc:
        fn(*a)
    return exc.value.code


def test_gvdm_layout():
    grid = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    data = encode_grid(grid)
    assert data[:4] == b"GVDM"
    assert struct.unpack("<III", data[4:16]) == (3, 2, 2)   # width, height, channels
    assert np.array_equal(np.frombuffer(data[16:], "<f4"), np.arange(12))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 1000))
def test_gvdm_round_trip(h, w, c, seed):
    grid = np.random.default_rng(seed).normal(size=(h, w, c)).astype(np.float32)
    data = encode_grid(grid)
    back = decode_grid(data)
    assert np.array_equal(back, grid)
    assert encode_grid(back) == data


@pytest.mark.parametrize("data", [b"", b"GVDX" + bytes(12), encode_grid(np.ones((2, 2)))[:-1],
                                  encode_grid(np.ones((2, 2))) + b"\0"])
def test_gvdm_malformed(data):
    assert _code(decode_grid, data) == "gvdm-format"


def test_video_round_trip(tmp_path, rng):
    video = rng.normal(size=(3, 2, 4, 5)).astype(np.float32).astype(np.float64)
    write_video(tmp_path / "v.gvdm", video)
    assert (tmp_path / "v.gvdm.hdr").read_text().split() == ["3", "2", "4", "5"]
    assert np.array_equal(read_video(tmp_path / "v.gvdm"), video)
    # channel index n * C + c
    grid = decode_grid((tmp_path / "v.gvdm").read_bytes())
    assert grid[1, 2, 1 * 2 + 1] == np.float32(video[1, 1, 1, 2])


def test_video_missing(tmp_path):
    assert _code(read_video, tmp_path / "none.gvdm") == "missing-file"


def test_mask_round_trip_and_values(tmp_path):
    mask = np.zeros((2, 4, 4))
    mask[:, :, :2] = 1
    write_mask(tmp_path / "m.gvdm", mask)
    assert np.array_equal(read_mask(tmp_path / "m.gvdm"), mask)
    write_mask(tmp_path / "bad.gvdm", mask * 0.5)
    assert _code(read_mask, tmp_path / "bad.gvdm") == "mask-values"


def test_dense_map_file(tmp_path, rng):
    d = DenseMap(5, 4, 2, rng.random((4, 5, 2)).astype(np.float32))
    write_dense_map(tmp_path / "d.gvdm", d)
    back = read_dense_map(tmp_path / "d.gvdm")
    assert (back.width, back.height, back.channels) == (5, 4, 2)
    assert np.array_equal(back.data, d.data)


def test_track_with_dense_paths(tmp_path, rng):
    write_dense_map(tmp_path / "d0.gvdm", DenseMap(4, 4, 1, rng.random((4, 4, 1))))
    track = random_track(1, num_frames=2, num_objects=1)
    track.dense_paths = ["d0.gvdm", None]
    (tmp_path / "t.json").write_bytes(serialize_track(track))
    loaded = load_track(tmp_path / "t.json")
    assert loaded.dense[1] is None and loaded.dense[0].width == 4


def test_checkpoint_round_trip(tmp_path):
    model = GroundedUNet(small_config())
    save_checkpoint(model, tmp_path / "a.gvck")
    other = GroundedUNet(small_config(init_seed=9))
    load_checkpoint(other, tmp_path / "a.gvck")
    save_checkpoint(other, tmp_path / "b.gvck")
    assert (tmp_path / "a.gvck").read_bytes() == (tmp_path / "b.gvck").read_bytes()
    for name, arr in decode_checkpoint((tmp_path / "a.gvck").read_bytes()).items():
        assert np.array_equal(dict(other.named_parameters())[name].data, arr)


def test_checkpoint_sorted_and_versioned():
    data = encode_checkpoint({"b": np.ones(2), "a": np.zeros((1, 3))})
    assert data[:4] == b"GVCK" and struct.unpack("<II", data[4:12]) == (1, 2)
    assert data[12:15] == b"\x01\x00a"
    back = decode_checkpoint(data)
    assert list(back) == ["a", "b"] and back["a"].shape == (1, 3)
    assert encode_checkpoint(back) == data


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-2],
    lambda d: d + b"\0",
    lambda d: d[:4] + struct.pack("<I", 7) + d[8:],
])
def test_checkpoint_malformed(mutate):
    data = encode_checkpoint({"w": np.ones((2, 2))})
    assert _code(decode_checkpoint, mutate(data)) == "gvck-format"


def test_checkpoint_mismatch(tmp_path):
    (tmp_path / "c.gvck").write_bytes(encode_checkpoint({"w": np.ones(2)}))
    assert _code(load_checkpoint, GroundedUNet(small_config()), tmp_path / "c.gvck") == "gvck-mismatch"
    assert _code(load_checkpoint, GroundedUNet(small_config()), tmp_path / "none.gvck") == "missing-file"
