"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per (kernel, shape) with the median time of each backend,
the speedup of the compiled path and the max absolute disagreement.
"""
import argparse
import statistics
import time

import numpy as np

from gvdiff._backend import load


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _attention_cases(rng):
    # (batch, Sq, Sk, D): temporal, tiny cross, mid-level and full-res self
    for b, sq, sk, d in [(16, 2, 2, 32), (256, 8, 8, 16), (8, 64, 8, 32),
                         (8, 16, 16, 64), (8, 64, 64, 32), (8, 256, 256, 16)]:
        q = rng.normal(size=(b, sq, d))
        k = rng.normal(size=(b, sk, d))
        v = rng.normal(size=(b, sk, d))
        bias = np.broadcast_to(rng.normal(size=(1, 1, sk)), (b, sq, sk))
        yield f"attention B={b} Sq={sq} Sk={sk} D={d}", (q, k, v, bias)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    try:
        fast = load("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return 1
    slow = load("python")
    rng = np.random.default_rng(0)
    print(f"{'case':<44}{'compiled ms':>12}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")

    def row(label, f_fast, f_slow, outs):
        tf, ts = _time(f_fast, args.repeat), _time(f_slow, args.repeat)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(*outs))
        print(f"{label:<44}{tf * 1e3:>12.3f}{ts * 1e3:>10.3f}{ts / tf:>9.2f}{diff:>11.1e}")

    for label, (q, k, v, b) in _attention_cases(rng):
        s = 1.0 / np.sqrt(q.shape[-1])
        row(label + " fwd",
            lambda: fast.attention_forward(q, k, v, b, s),
            lambda: slow.attention_forward(q, k, v, b, s),
            (fast.attention_forward(q, k, v, b, s), slow.attention_forward(q, k, v, b, s)))
        _, p = slow.attention_forward(q, k, v, b, s)
        g = rng.normal(size=q.shape[:2] + (v.shape[-1],))
        row(label + " bwd",
            lambda: fast.attention_backward(q, k, v, p, g, s),
            lambda: slow.attention_backward(q, k, v, p, g, s),
            (fast.attention_backward(q, k, v, p, g, s), slow.attention_backward(q, k, v, p, g, s)))
    for h, w in [(16, 16), (64, 64), (256, 256)]:
        grid = rng.random((h, w))
        ker = np.exp(-0.5 * np.arange(-2, 3) ** 2)
        ker /= ker.sum()
        row(f"blur {h}x{w} radius 2",
            lambda: fast.blur_2d(grid, ker), lambda: slow.blur_2d(grid, ker),
            ((fast.blur_2d(grid, ker),), (slow.blur_2d(grid, ker),)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
