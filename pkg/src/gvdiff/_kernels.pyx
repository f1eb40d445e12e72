# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: fused biased attention (forward/backward) and the
reflect-padded separable blur. ``gvdiff._kernels_py`` mirrors every function
here with vectorized numpy and is used when this module cannot be imported.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cdef extern from "_fastexp.h" nogil:
    double gv_exp_nonpos(double x)

cnp.import_array()


def attention_forward(q, k, v, bias, double scale):
    """Batched softmax(q k^T * scale + bias) v.

    ``bias`` must broadcast to (B, Sq, Sk); batch and query axes of size 1
    are broadcast without copying. Returns ``(out, probs)``.
    """
    cdef const double[:, :, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[:, :, ::1] kt = np.ascontiguousarray(np.swapaxes(k, 1, 2), dtype=np.float64)
    cdef const double[:, :, ::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    bias = _compact_bias(bias)
    cdef const double[:, :, ::1] bv = bias
    cdef Py_ssize_t B = qv.shape[0], Sq = qv.shape[1], D = qv.shape[2]
    cdef Py_ssize_t Sk = kt.shape[2], Dv = vv.shape[2]
    cdef Py_ssize_t bb_stride = 1 if bv.shape[0] > 1 else 0
    cdef Py_ssize_t bq_stride = 1 if bv.shape[1] > 1 else 0
    cdef Py_ssize_t b, i, j, c
    cdef double mx, total, p, qc
    out_arr = np.zeros((B, Sq, Dv), dtype=np.float64)
    probs_arr = np.empty((B, Sq, Sk), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] probs = probs_arr
    cdef double* row
    cdef double* orow
    cdef const double* brow
    cdef const double* src
    with nogil:
        for b in range(B):
            for i in range(Sq):
                row = &probs[b, i, 0]
                brow = &bv[b * bb_stride, i * bq_stride, 0]
                for j in range(Sk):
                    row[j] = 0.0
                for c in range(D):
                    qc = qv[b, i, c] * scale
                    src = &kt[b, c, 0]
                    for j in range(Sk):
                        row[j] = row[j] + qc * src[j]
                mx = -1e308
                for j in range(Sk):
                    row[j] = row[j] + brow[j]
                    if row[j] > mx:
                        mx = row[j]
                for j in range(Sk):
                    row[j] = gv_exp_nonpos(row[j] - mx)
                total = 0.0
                for j in range(Sk):
                    total = total + row[j]
                total = 1.0 / total
                orow = &out[b, i, 0]
                for j in range(Sk):
                    p = row[j] * total
                    row[j] = p
                    src = &vv[b, j, 0]
                    for c in range(Dv):
                        orow[c] = orow[c] + p * src[c]
    return out_arr, probs_arr


def _compact_bias(bias):
    # keep size-1 broadcast axes instead of materializing (B, Sq, Sk)
    bias = np.asarray(bias, dtype=np.float64)
    shape = list(bias.shape)
    for ax in (0, 1):
        if bias.strides[ax] == 0:
            shape[ax] = 1
    idx = tuple(slice(0, 1) if n == 1 else slice(None) for n in shape)
    return np.ascontiguousarray(bias[idx])


def attention_backward(q, k, v, probs, gout, double scale):
    """Vector-Jacobian product of :func:`attention_forward`.

    Returns ``(gq, gk, gv, glogits)``; ``glogits`` is the gradient with
    respect to the additive bias at full (B, Sq, Sk) shape.
    """
    cdef const double[:, :, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef const double[:, :, ::1] kv = np.ascontiguousarray(k, dtype=np.float64)
    cdef const double[:, :, ::1] vt = np.ascontiguousarray(np.swapaxes(v, 1, 2), dtype=np.float64)
    cdef const double[:, :, ::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef const double[:, :, ::1] go = np.ascontiguousarray(gout, dtype=np.float64)
    cdef Py_ssize_t B = qv.shape[0], Sq = qv.shape[1], D = qv.shape[2]
    cdef Py_ssize_t Sk = kv.shape[1], Dv = vt.shape[1]
    cdef Py_ssize_t b, i, j, c
    cdef double dot, p, g, goc
    gq_arr = np.zeros((B, Sq, D), dtype=np.float64)
    gk_arr = np.zeros((B, Sk, D), dtype=np.float64)
    gv_arr = np.zeros((B, Sk, Dv), dtype=np.float64)
    gl_arr = np.zeros((B, Sq, Sk), dtype=np.float64)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[:, :, ::1] gl = gl_arr
    cdef double* row
    cdef double* dst
    cdef double* dst2
    cdef const double* src
    cdef const double* src2
    with nogil:
        for b in range(B):
            for i in range(Sq):
                row = &gl[b, i, 0]
                for c in range(Dv):
                    goc = go[b, i, c]
                    src = &vt[b, c, 0]
                    for j in range(Sk):
                        row[j] = row[j] + goc * src[j]
                dot = 0.0
                src2 = &go[b, i, 0]
                for j in range(Sk):
                    p = pv[b, i, j]
                    dot = dot + p * row[j]
                    dst = &gv[b, j, 0]
                    for c in range(Dv):
                        dst[c] = dst[c] + p * src2[c]
                dst2 = &gq[b, i, 0]
                src2 = &qv[b, i, 0]
                for j in range(Sk):
                    g = pv[b, i, j] * (row[j] - dot)
                    row[j] = g
                    g = g * scale
                    src = &kv[b, j, 0]
                    dst = &gk[b, j, 0]
                    for c in range(D):
                        dst2[c] = dst2[c] + g * src[c]
                        dst[c] = dst[c] + g * src2[c]
    return gq_arr, gk_arr, gv_arr, gl_arr


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) nogil:
    # half-sample symmetric extension: ... b a | a b c | c b ...
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        else:
            i = 2 * n - i - 1
    return i


def blur_2d(const double[:, :] grid, const double[:] kernel):
    """Separable blur with a normalized 1-D kernel of odd length 2r+1 and
    symmetric reflection at the borders (rows then columns)."""
    cdef Py_ssize_t H = grid.shape[0], W = grid.shape[1]
    cdef Py_ssize_t L = kernel.shape[0], r = (L - 1) // 2
    cdef Py_ssize_t y, x, d
    cdef double acc
    tmp_arr = np.empty((H, W), dtype=np.float64)
    out_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for d in range(L):
                acc = acc + kernel[d] * grid[y, _reflect(x + d - r, W)]
            tmp[y, x] = acc
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for d in range(L):
                acc = acc + kernel[d] * tmp[_reflect(y + d - r, H), x]
            out[y, x] = acc
    return out_arr
