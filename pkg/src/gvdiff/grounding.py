"""Grounding conditions: types, validation, Gaussian priors and attention biases.

A :class:`GroundingTrack` holds, for every object, one condition slot per
frame (a :class:`BoundingBox`, a :class:`Keypoint`, or ``None`` when the
object is absent). Sparse conditions are rendered as peak-normalized 2-D
Gaussians and averaged into a single map per frame; dense conditions
(depth, edges, ...) go through a mass-preserving blur instead. Either map
becomes an additive per-key bias on self-attention logits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from gvdiff.errors import GVDiffError
from gvdiff.numerics import area_resize, gaussian_blur_2d

DEFAULT_KEYPOINT_SIGMA = 0.05


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def coords(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def in_range(self):
        return all(0.0 <= c <= 1.0 for c in self.coords())

    def is_degenerate(self):
        return not (self.x_min < self.x_max and self.y_min < self.y_max)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visible: bool = True

    def coords(self):
        # keypoints share the box encoding width: (x, y, x, y)
        return (self.x, self.y, self.x, self.y)

    def in_range(self):
        return 0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0


@dataclass(eq=False)
class DenseMap:
    """A dense grid condition, stored as (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(
            self.height, self.width, self.channels)
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise GVDiffError("dense-values", "dense maps must be finite and nonnegative")


@dataclass(eq=False)
class GroundingMap:
    width: int
    height: int
    grid: np.ndarray
    normalization: str = "raw"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64).reshape(self.height, self.width)


@dataclass(frozen=True)
class GaussianParams:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise GVDiffError("gaussian-sigma", "spreads must be positive")


@dataclass
class TrackObject:
    phrase: str
    conditions: list  # BoundingBox | Keypoint | None, one per frame


@dataclass
class GroundingTrack:
    num_frames: int
    objects: list = field(default_factory=list)
    dense_paths: list | None = None
    dense: list | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.num_frames < 1:
            raise GVDiffError("track-frames", "a track needs at least one frame")
        for obj in self.objects:
            if len(obj.conditions) != self.num_frames:
                raise GVDiffError(
                    "track-frames",
                    f"object {obj.phrase!r} has {len(obj.conditions)} slots, "
                    f"expected {self.num_frames}",
                )
        for seq in (self.dense_paths, self.dense):
            if seq is not None and len(seq) != self.num_frames:
                raise GVDiffError("track-frames", "dense list length != num_frames")

    @property
    def num_objects(self):
        return len(self.objects)

    def present(self, frame):
        """Conditions of objects present in ``frame`` (object order kept)."""
        return [o.conditions[frame] for o in self.objects if o.conditions[frame] is not None]

    def dense_at(self, frame):
        return None if self.dense is None else self.dense[frame]

    def slice(self, start, end):
        """Frames ``[start, end)`` as a new track."""
        def cut(seq):
            return None if seq is None else list(seq[start:end])
        return GroundingTrack(
            end - start,
            [TrackObject(o.phrase, list(o.conditions[start:end])) for o in self.objects],
            cut(self.dense_paths),
            cut(self.dense),
        )

    @classmethod
    def empty(cls, num_frames):
        return cls(num_frames, [])


# -- Gaussian priors -------------------------------------------------------------

def gaussian_params_from_condition(cond, keypoint_sigma=DEFAULT_KEYPOINT_SIGMA):
    """Box: centre and quarter extents. Keypoint: the point with a fixed spread."""
    if isinstance(cond, BoundingBox):
        if cond.is_degenerate():
            raise GVDiffError("degenerate-box", f"zero-area box {cond.coords()}")
        return GaussianParams(
            (cond.x_min + cond.x_max) / 2,
            (cond.y_min + cond.y_max) / 2,
            (cond.x_max - cond.x_min) / 4,
            (cond.y_max - cond.y_min) / 4,
        )
    if isinstance(cond, Keypoint):
        return GaussianParams(cond.x, cond.y, keypoint_sigma, keypoint_sigma)
    raise TypeError(f"not a sparse condition: {cond!r}")


def gaussian_density(params, x, y):
    """Closed-form axis-aligned 2-D normal density at normalized (x, y)."""
    p = params
    norm = 1.0 / (2.0 * math.pi * p.sigma_x * p.sigma_y)
    ex = (np.asarray(x) - p.mu_x) ** 2 / (2.0 * p.sigma_x ** 2)
    ey = (np.asarray(y) - p.mu_y) ** 2 / (2.0 * p.sigma_y ** 2)
    return norm * np.exp(-(ex + ey))


def cell_centers(n):
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def render_gaussian(params, width, height):
    """Density sampled at cell centres; rows index y, columns index x."""
    xs = cell_centers(width)[None, :]
    ys = cell_centers(height)[:, None]
    return GroundingMap(width, height, gaussian_density(params, xs, ys), "raw")


def peak_normalize(grid):
    peak = grid.max(initial=0.0)
    return grid / peak if peak > 0 else np.zeros_like(grid)


def build_uncertainty_map(track, frame, width, height,
                          keypoint_sigma=DEFAULT_KEYPOINT_SIGMA):
    """Average of the peak-normalized Gaussians of objects present in ``frame``."""
    if not 0 <= frame < track.num_frames:
        raise GVDiffError("frame-index", f"frame {frame} outside [0, {track.num_frames})")
    conds = track.present(frame)
    acc = np.zeros((height, width))
    for cond in conds:
        params = gaussian_params_from_condition(cond, keypoint_sigma)
        acc += peak_normalize(render_gaussian(params, width, height).grid)
    if conds:
        acc /= len(conds)
    return GroundingMap(width, height, acc, "peak-normalized")


def densify(dense, sigma, radius):
    """Channel-averaged, blurred and peak-normalized dense condition."""
    grid = dense.data.mean(axis=2)
    blurred = gaussian_blur_2d(grid, sigma, radius)
    return GroundingMap(dense.width, dense.height, peak_normalize(blurred), "peak-normalized")


def condition_map(track, frame, width, height, blur_sigma=1.0, blur_radius=2,
                  keypoint_sigma=DEFAULT_KEYPOINT_SIGMA):
    """The grounding prior used for ``frame``.

    Sparse conditions give the uncertainty map; a dense map (if loaded) is
    densified and resized to ``width x height``. When both exist they are
    averaged. Frames with neither give an all-zero map.
    """
    maps = []
    if track.present(frame):
        maps.append(build_uncertainty_map(track, frame, width, height, keypoint_sigma).grid)
    dense = track.dense_at(frame)
    if dense is not None:
        g = densify(dense, blur_sigma, blur_radius).grid
        if g.shape != (height, width):
            g = peak_normalize(area_resize(g, height, width))
        maps.append(g)
    grid = np.mean(maps, axis=0) if maps else np.zeros((height, width))
    return GroundingMap(width, height, grid, "peak-normalized")


def map_to_attention_bias(gmap, target_width, target_height, scale=1.0):
    """Area-average ``gmap`` to the layer resolution; flatten row-major; scale."""
    if target_width < 1 or target_height < 1:
        raise GVDiffError("bias-shape", f"target {target_width}x{target_height}")
    grid = gmap.grid
    if grid.shape != (target_height, target_width):
        grid = area_resize(grid, target_height, target_width)
    return scale * grid.reshape(-1)


# -- track files ---------------------------------------------------------------

def _parse_cond(raw, kind):
    if raw is None:
        return None
    if not isinstance(raw, (list, tuple)) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise GVDiffError("track-parse", f"bad {kind} entry {raw!r}")
    if kind == "boxes":
        if len(raw) != 4:
            raise GVDiffError("track-parse", f"box needs 4 numbers, got {raw!r}")
        cond = BoundingBox(*map(float, raw))
    else:
        if len(raw) not in (2, 3):
            raise GVDiffError("track-parse", f"keypoint needs 2 or 3 numbers, got {raw!r}")
        cond = Keypoint(float(raw[0]), float(raw[1]), bool(raw[2]) if len(raw) == 3 else True)
    if not all(math.isfinite(c) for c in cond.coords()) or not cond.in_range():
        raise GVDiffError("track-range", f"{kind} entry {raw!r} outside [0, 1]")
    if kind == "boxes" and cond.is_degenerate():
        raise GVDiffError("degenerate-box", f"zero-area box {raw!r}")
    return cond


def parse_condition_file(data):
    """Parse and validate a JSON track (bytes or str)."""
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise GVDiffError("track-parse", str(exc)) from None
    if not isinstance(doc, dict) or "num_frames" not in doc:
        raise GVDiffError("track-parse", "expected an object with num_frames")
    n = doc["num_frames"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise GVDiffError("track-parse", "num_frames must be an integer")
    if n < 1:
        raise GVDiffError("track-frames", "num_frames must be >= 1")
    objects = []
    for raw in doc.get("objects", []):
        if not isinstance(raw, dict) or not isinstance(raw.get("phrase", ""), str):
            raise GVDiffError("track-parse", f"bad object {raw!r}")
        kinds = [k for k in ("boxes", "keypoints") if k in raw]
        if len(kinds) != 1 or not isinstance(raw[kinds[0]], list):
            raise GVDiffError("track-parse", "each object needs exactly one of boxes/keypoints")
        slots = raw[kinds[0]]
        if len(slots) != n:
            raise GVDiffError(
                "track-frames", f"object {raw.get('phrase')!r} has {len(slots)} entries, expected {n}")
        objects.append(TrackObject(raw.get("phrase", ""),
                                   [_parse_cond(s, kinds[0]) for s in slots]))
    dense = doc.get("dense")
    if dense is not None:
        if not isinstance(dense, list) or not all(d is None or isinstance(d, str) for d in dense):
            raise GVDiffError("track-parse", "dense must be a list of paths or nulls")
        if len(dense) != n:
            raise GVDiffError("track-frames", f"dense has {len(dense)} entries, expected {n}")
    return GroundingTrack(n, objects, dense)


def serialize_track(track):
    objs = []
    for o in track.objects:
        kp = any(isinstance(c, Keypoint) for c in o.conditions)
        if kp:
            slots = [None if c is None else [c.x, c.y, int(c.visible)] for c in o.conditions]
            objs.append({"phrase": o.phrase, "keypoints": slots})
        else:
            slots = [None if c is None else list(c.coords()) for c in o.conditions]
            objs.append({"phrase": o.phrase, "boxes": slots})
    doc = {"num_frames": track.num_frames, "objects": objs}
    if track.dense_paths is not None:
        doc["dense"] = list(track.dense_paths)
    return json.dumps(doc, indent=1).encode("utf-8")


def load_track(path):
    """Read a track file and load any referenced dense maps (paths relative
    to the track file)."""
    from pathlib import Path

    from gvdiff.io import read_dense_map

    path = Path(path)
    track = parse_condition_file(path.read_bytes())
    if track.dense_paths is not None:
        track.dense = [None if p is None else read_dense_map(path.parent / p)
                       for p in track.dense_paths]
    return track
