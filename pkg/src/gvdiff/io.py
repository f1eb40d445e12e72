"""Binary containers.

GVDM grid (dense maps, latent videos, masks)::

    b"GVDM" | u32 width | u32 height | u32 channels | f32[height][width][channels]

Latent videos (N, C, H, W) are stored with ``channels = N * C`` (channel
index ``n * C + c``) plus a text sidecar ``<path>.hdr`` holding ``N C H W``.
Masks (N, H, W) are stored with ``channels = N``.

GVCK checkpoint::

    b"GVCK" | u32 version | u32 count |
    count x (u16 name_len | utf-8 name | u8 rank | u32 dims[rank] | f32 data)

Parameters are written in lexicographic name order. All integers and floats
are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from gvdiff.errors import GVDiffError

GVDM_MAGIC = b"GVDM"
GVCK_MAGIC = b"GVCK"
GVCK_VERSION = 1
_F32 = np.dtype("<f4")


# -- GVDM ----------------------------------------------------------------------

def encode_grid(grid):
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise GVDiffError("gvdm-format", f"grid must be 2-D or 3-D, got {grid.shape}")
    h, w, c = grid.shape
    return GVDM_MAGIC + struct.pack("<III", w, h, c) + grid.astype(_F32).tobytes(order="C")


def decode_grid(data):
    """Returns a float32 array of shape (height, width, channels)."""
    if len(data) < 16 or data[:4] != GVDM_MAGIC:
        raise GVDiffError("gvdm-format", "missing GVDM magic")
    w, h, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * w * h * c
    if len(data) != expected:
        raise GVDiffError("gvdm-format", f"expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=_F32, offset=16).reshape(h, w, c).copy()


def read_dense_map(path):
    from gvdiff.grounding import DenseMap

    try:
        grid = decode_grid(Path(path).read_bytes())
    except FileNotFoundError:
        raise GVDiffError("missing-file", str(path)) from None
    h, w, c = grid.shape
    return DenseMap(w, h, c, grid)


def write_dense_map(path, dense):
    Path(path).write_bytes(encode_grid(dense.data))


def video_to_grid(video):
    n, c, h, w = video.shape
    return np.transpose(np.asarray(video), (2, 3, 0, 1)).reshape(h, w, n * c)


def grid_to_video(grid, n, c):
    h, w, nc = grid.shape
    if nc != n * c:
        raise GVDiffError("gvdm-format", f"{nc} channels cannot hold {n} x {c}")
    return np.transpose(grid.reshape(h, w, n, c), (2, 3, 0, 1)).copy()


def write_video(path, video):
    """Write a latent video and its ``.hdr`` sidecar."""
    path = Path(path)
    n, c, h, w = np.shape(video)
    path.write_bytes(encode_grid(video_to_grid(video)))
    Path(str(path) + ".hdr").write_text(f"{n} {c} {h} {w}\n")


def read_video(path):
    path = Path(path)
    hdr = Path(str(path) + ".hdr")
    try:
        grid = decode_grid(path.read_bytes())
        dims = hdr.read_text().split()
    except FileNotFoundError as exc:
        raise GVDiffError("missing-file", str(exc.filename)) from None
    if len(dims) != 4:
        raise GVDiffError("gvdm-format", f"bad sidecar header {hdr}")
    n, c, h, w = map(int, dims)
    video = grid_to_video(grid, n, c)
    if video.shape != (n, c, h, w):
        raise GVDiffError("gvdm-format", f"header says {(n, c, h, w)}, data is {video.shape}")
    return video.astype(np.float64)


def write_mask(path, mask):
    Path(path).write_bytes(encode_grid(np.transpose(np.asarray(mask), (1, 2, 0))))


def read_mask(path):
    try:
        grid = decode_grid(Path(path).read_bytes())
    except FileNotFoundError:
        raise GVDiffError("missing-file", str(path)) from None
    mask = np.transpose(grid, (2, 0, 1)).astype(np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise GVDiffError("mask-values", "mask entries must be 0 or 1")
    return mask


# -- GVCK ----------------------------------------------------------------------

def encode_checkpoint(arrays):
    """``arrays`` maps parameter name to ndarray."""
    out = [GVCK_MAGIC, struct.pack("<II", GVCK_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(_F32).tobytes(order="C"))
    return b"".join(out)


def decode_checkpoint(data):
    """Returns ``{name: float32 ndarray}``."""
    def need(pos, n):
        if pos + n > len(data):
            raise GVDiffError("gvck-format", "truncated checkpoint")

    if data[:4] != GVCK_MAGIC:
        raise GVDiffError("gvck-format", "missing GVCK magic")
    need(4, 8)
    version, count = struct.unpack_from("<II", data, 4)
    if version != GVCK_VERSION:
        raise GVDiffError("gvck-format", f"unsupported version {version}")
    pos = 12
    arrays = {}
    for _ in range(count):
        need(pos, 2)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(pos, nlen + 1)
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = data[pos]
        pos += 1
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(pos, 4 * size)
        arrays[name] = np.frombuffer(data, dtype=_F32, count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(data):
        raise GVDiffError("gvck-format", "trailing bytes after last parameter")
    return arrays
