import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvdiff.errors import GVDiffError
from gvdiff.grounding import (
    BoundingBox,
    DenseMap,
    GaussianParams,
    GroundingMap,
    GroundingTrack,
    Keypoint,
    TrackObject,
    build_uncertainty_map,
    condition_map,
    densify,
    gaussian_density,
    gaussian_params_from_condition,
    map_to_attention_bias,
    parse_condition_file,
    render_gaussian,
    serialize_track,
)
from gvdiff.numerics import scaled_dot_attention

from conftest import random_track


def _code(fn, *a):
    with pytest.raises(GVDiffError) as exc:
        fn(*a)
    return exc.value.code


# -- Gaussian parameters and rendering ------------------------------------------

def test_box_params():
    p = gaussian_params_from_condition(BoundingBox(0.3, 0.3, 0.7, 0.7))
    assert (p.mu_x, p.mu_y) == (0.5, 0.5)
    assert math.isclose(p.sigma_x, 0.1, abs_tol=1e-15) and math.isclose(p.sigma_y, 0.1, abs_tol=1e-15)


def test_keypoint_params():
    assert gaussian_params_from_condition(Keypoint(0.2, 0.8)) == GaussianParams(0.2, 0.8, 0.05, 0.05)


def test_degenerate_box():
    assert _code(gaussian_params_from_condition, BoundingBox(0.3, 0.3, 0.3, 0.7)) == "degenerate-box"


def test_peak_density_and_one_sigma_ratio():
    p = GaussianParams(0.5, 0.5, 0.1, 0.1)
    peak = gaussian_density(p, 0.5, 0.5)
    assert abs(peak - 1 / (2 * math.pi * 0.01)) < 1e-9
    assert abs(peak - 15.9155) < 1e-4
    assert abs(gaussian_density(p, 0.6, 0.5) / peak - math.exp(-0.5)) < 1e-9


def test_render_symmetric_about_mean():
    g = render_gaussian(GaussianParams(0.5, 0.5, 0.13, 0.07), 20, 20).grid
    assert np.allclose(g, g[::-1, :], rtol=0, atol=1e-12)
    assert np.allclose(g, g[:, ::-1], rtol=0, atol=1e-12)


def test_render_integrates_to_one():
    g = render_gaussian(GaussianParams(0.45, 0.55, 0.08, 0.12), 256, 256).grid
    assert abs(g.sum() / 256 ** 2 - 1) < 0.02


# -- uncertainty maps --------------------------------------------------------------

def _track(*conds_per_object, n=1):
    return GroundingTrack(n, [TrackObject(f"o{i}", list(c)) for i, c in enumerate(conds_per_object)])


def test_two_identical_boxes_equal_one():
    box = BoundingBox(0.2, 0.3, 0.6, 0.8)
    one = build_uncertainty_map(_track([box]), 0, 16, 16).grid
    two = build_uncertainty_map(_track([box], [box]), 0, 16, 16).grid
    assert np.allclose(one, two, rtol=0, atol=1e-12)
    assert one.max() == 1.0


def test_no_objects_zero_map():
    assert np.array_equal(build_uncertainty_map(_track([None]), 0, 8, 8).grid, np.zeros((8, 8)))


def test_frame_index_error():
    assert _code(build_uncertainty_map, _track([None]), 3, 8, 8) == "frame-index"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_uncertainty_map_range_and_permutation(seed):
    track = random_track(seed, num_frames=2, num_objects=3)
    rev = GroundingTrack(2, track.objects[::-1])
    for j in range(2):
        a = build_uncertainty_map(track, j, 12, 10).grid
        assert a.min() >= 0 and a.max() <= 1
        assert np.allclose(a, build_uncertainty_map(rev, j, 12, 10).grid, rtol=0, atol=1e-12)


# -- dense conditions ----------------------------------------------------------

def test_densify_zero():
    d = DenseMap(6, 5, 2, np.zeros((5, 6, 2)))
    assert np.array_equal(densify(d, 1.0, 2).grid, np.zeros((5, 6)))


def test_densify_impulse():
    data = np.zeros((15, 15, 1))
    data[7, 7, 0] = 4.0
    out = densify(DenseMap(15, 15, 1, data), 1.0, 2).grid
    assert out.max() == 1.0 and out[7, 7] == 1.0


def test_densify_constant():
    out = densify(DenseMap(7, 6, 3, np.full((6, 7, 3), 0.3)), 1.2, 2).grid
    assert np.allclose(out, 1.0, rtol=0, atol=1e-12)


def test_dense_values_validated():
    assert _code(DenseMap, 2, 2, 1, np.array([[[-1.0], [0]], [[0], [0]]])) == "dense-values"


def test_condition_map_averages_sparse_and_dense():
    box = BoundingBox(0.1, 0.1, 0.5, 0.5)
    track = _track([box])
    track.dense = [DenseMap(8, 8, 1, np.ones((8, 8, 1)))]
    sparse = build_uncertainty_map(_track([box]), 0, 8, 8).grid
    assert np.allclose(condition_map(track, 0, 8, 8).grid, (sparse + 1.0) / 2, rtol=0, atol=1e-12)


# -- attention bias --------------------------------------------------------------

def test_zero_map_bias_is_zero(rng):
    b = map_to_attention_bias(GroundingMap(8, 8, np.zeros((8, 8))), 4, 4)
    assert np.array_equal(b, np.zeros(16))
    q, k, v = rng.normal(size=(16, 4)), rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
    assert np.allclose(scaled_dot_attention(q, k, v, b), scaled_dot_attention(q, k, v), rtol=0, atol=1e-12)


def test_constant_map_bias(rng):
    b = map_to_attention_bias(GroundingMap(8, 8, np.ones((8, 8))), 8, 8, 1.0)
    assert np.array_equal(b, np.ones(64))
    q, k, v = rng.normal(size=(64, 4)), rng.normal(size=(64, 4)), rng.normal(size=(64, 4))
    assert np.allclose(scaled_dot_attention(q, k, v, b), scaled_dot_attention(q, k, v), rtol=0, atol=1e-10)


def test_checkerboard_downsample():
    board = (np.indices((8, 8)).sum(0) % 2).astype(float)
    assert np.array_equal(map_to_attention_bias(GroundingMap(8, 8, board), 4, 4), np.full(16, 0.5))


def test_zero_scale_bias_leaves_attention(rng):
    g = GroundingMap(8, 8, np.random.default_rng(2).random((8, 8)))
    b = map_to_attention_bias(g, 4, 4, scale=0.0)
    q, k, v = rng.normal(size=(16, 4)), rng.normal(size=(16, 4)), rng.normal(size=(16, 4))
    assert np.allclose(scaled_dot_attention(q, k, v, b), scaled_dot_attention(q, k, v), rtol=0, atol=1e-12)


def test_bias_shape_error():
    assert _code(map_to_attention_bias, GroundingMap(2, 2, np.zeros((2, 2))), 0, 2) == "bias-shape"


# -- track files -------------------------------------------------------------------

def test_parse_minimal_track():
    t = parse_condition_file(b'{"num_frames": 2, "objects": [{"phrase": "cat", '
                             b'"boxes": [[0.1, 0.1, 0.5, 0.5], [0.2, 0.2, 0.6, 0.6]]}]}')
    assert t.num_frames == 2 and t.num_objects == 1
    assert t.objects[0].conditions[1] == BoundingBox(0.2, 0.2, 0.6, 0.6)


@pytest.mark.parametrize("doc,code", [
    (b'{"num_frames": 1, "objects": [{"phrase": "a", "boxes": [[0, 0, 1.2, 0.5]]}]}', "track-range"),
    (b'{"num_frames": 4, "objects": [{"phrase": "a", "boxes": [null, null, null]}]}', "track-frames"),
    (b'{"num_frames": 1, "objects": [{"phrase": "a", "boxes": [[0.3, 0.3, 0.3, 0.7]]}]}', "degenerate-box"),
    (b'{"num_frames": 2, "objects": [', "track-parse"),
    (b'{"objects": []}', "track-parse"),
    (b'{"num_frames": 0}', "track-frames"),
    (b'{"num_frames": 1, "objects": [{"phrase": "a", "boxes": [[0, 0, 1]]}]}', "track-parse"),
    (b'{"num_frames": 1, "objects": [{"phrase": "a", "keypoints": [[0.5, 1.5]]}]}', "track-range"),
    (b'{"num_frames": 2, "dense": ["a.gvdm"]}', "track-frames"),
])
def test_parse_errors(doc, code):
    assert _code(parse_condition_file, doc) == code


def test_missing_slots_marked():
    t = parse_condition_file(b'{"num_frames": 3, "objects": [{"phrase": "a", '
                             b'"boxes": [null, [0.1, 0.1, 0.4, 0.4], null]}]}')
    assert t.objects[0].conditions[0] is None and t.present(0) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_track_round_trip(seed):
    track = random_track(seed, num_frames=3, num_objects=3)
    text = serialize_track(track)
    again = parse_condition_file(text)
    assert again == track
    assert serialize_track(again) == text
