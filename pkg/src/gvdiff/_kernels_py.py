"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and return conventions are identical; results agree with the
compiled path to within floating-point summation order.
"""
import numpy as np


def attention_forward(q, k, v, bias, scale):
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * scale + bias
    logits = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v), probs


def attention_backward(q, k, v, probs, gout, scale):
    gv = np.matmul(np.swapaxes(probs, -1, -2), gout)
    gp = np.matmul(gout, np.swapaxes(v, -1, -2))
    gl = probs * (gp - (probs * gp).sum(axis=-1, keepdims=True))
    gq = np.matmul(gl, k) * scale
    gk = np.matmul(np.swapaxes(gl, -1, -2), q) * scale
    return gq, gk, gv, gl


def blur_2d(grid, kernel):
    grid = np.asarray(grid, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    r = (len(kernel) - 1) // 2
    padded = np.pad(grid, r, mode="symmetric")
    h, w = grid.shape
    tmp = np.zeros((h + 2 * r, w))
    for d, kd in enumerate(kernel):
        tmp += kd * padded[:, d:d + w]
    out = np.zeros((h, w))
    for d, kd in enumerate(kernel):
        out += kd * tmp[d:d + h, :]
    return out
