"""Kernel backend selection.

The compiled extension is preferred; set ``GVDIFF_PURE_PYTHON=1`` to force
the numpy fallback (useful for debugging or when no compiler is available).

The compiled attention kernels only beat numpy's BLAS-backed matmuls for
small per-head problems, so the compiled backend routes attention by size:
compiled when ``Sq * Sk * D <= ATTENTION_CUTOFF``, numpy otherwise. Blur is
always compiled. ``benchmarks/bench_kernels.py`` measures the crossover.
"""
import importlib
import os
import types

__all__ = ["kernels", "BACKEND", "load", "ATTENTION_CUTOFF"]

ATTENTION_CUTOFF = int(os.environ.get("GVDIFF_ATTENTION_CUTOFF", "512"))


def load(name):
    """Import a kernel backend by name (``"cython"`` or ``"python"``)."""
    if name == "cython":
        return importlib.import_module("gvdiff._kernels")
    if name == "python":
        return importlib.import_module("gvdiff._kernels_py")
    if name == "auto":
        return _dispatching(load("cython"), load("python"))
    raise ValueError(f"unknown kernel backend {name!r}")


def _dispatching(fast, fallback):
    def attention_forward(q, k, v, bias, scale):
        small = q.shape[1] * k.shape[1] * q.shape[2] <= ATTENTION_CUTOFF
        return (fast if small else fallback).attention_forward(q, k, v, bias, scale)

    def attention_backward(q, k, v, probs, gout, scale):
        small = q.shape[1] * k.shape[1] * q.shape[2] <= ATTENTION_CUTOFF
        return (fast if small else fallback).attention_backward(q, k, v, probs, gout, scale)

    return types.SimpleNamespace(attention_forward=attention_forward,
                                 attention_backward=attention_backward,
                                 blur_2d=fast.blur_2d)


if os.environ.get("GVDIFF_PURE_PYTHON", "0") not in ("", "0"):
    kernels = load("python")
    BACKEND = "python"
else:
    try:
        kernels = load("auto")
        BACKEND = "cython"
    except ImportError:
        kernels = load("python")
        BACKEND = "python"
