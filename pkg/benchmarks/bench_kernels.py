"""Compiled kernels against the numpy fallback on training-sized workloads.

Run ``python3 benchmarks/bench_kernels.py`` after building the extension.
Each row reports the best of several repeats and checks that the two
backends return identical results.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tracknet import _fallback
from tracknet.geometry import to_corners

try:
    from tracknet import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def _nms_case(rng):
    n, t_len = 2000, 8
    c = rng.uniform(0.1, 0.9, size=(n, 1, 2)) + rng.normal(0, 0.01, size=(n, t_len, 2)).cumsum(1)
    wh = rng.uniform(0.05, 0.25, size=(n, t_len, 2))
    corners = np.ascontiguousarray(to_corners(np.concatenate([c, wh], axis=-1)))
    order = np.argsort(-rng.random(n), kind="stable").astype(np.int64)
    return "tube_nms (2000 x 8 frames)", (corners, order, 0.7)


def _roi_case(rng):
    feat = rng.normal(size=(32, 32, 256)).astype(np.float32)
    y0 = rng.integers(0, 28, size=256)
    x0 = rng.integers(0, 28, size=256)
    y1 = y0 + rng.integers(1, 33 - y0)
    x1 = x0 + rng.integers(1, 33 - x0)
    regions = np.stack([y0, y1, x0, x1], axis=1).astype(np.int64)
    return "roi_pool_forward (256 regions, 7x7)", (feat, np.ascontiguousarray(regions), 7)


def _roi_back_case(rng):
    name, (feat, regions, bins) = _roi_case(rng)
    _, arg = _fallback.roi_pool_forward(feat, regions, bins)
    grad = rng.normal(size=arg.shape).astype(np.float32)
    return "roi_pool_backward (256 regions)", (grad, np.ascontiguousarray(arg), 32, 32)


def _bm_case(rng):
    radius, block = 4, 8
    pad = radius + block
    prev = np.pad(rng.random((128, 128, 3)), ((pad, pad), (pad, pad), (0, 0))).astype(np.float32)
    nxt = np.roll(prev, (2, -1), axis=(0, 1))
    centers = np.arange(32) * 4 + 2 + pad
    gy, gx = (a.ravel().astype(np.int64) for a in np.meshgrid(centers, centers, indexing="ij"))
    return "block_match (32x32 cells, r=4)", (prev, nxt, gy, gx, radius, block)


CASES = {
    "tube_nms": _nms_case,
    "roi_pool_forward": _roi_case,
    "roi_pool_backward": _roi_back_case,
    "block_match": _bm_case,
}


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def best_time(fn, args, repeat: int) -> float:
    number = 1
    while True:
        t = timeit.timeit(lambda: fn(*args), number=number)
        if t > 0.2 or number >= 1000:
            break
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<38} {'numpy (ms)':>11} {'compiled (ms)':>14} {'speedup':>8}  match")
    for key, make in CASES.items():
        name, case_args = make(np.random.default_rng(args.seed))
        py_fn, c_fn = getattr(_fallback, key), getattr(_ckernels, key)
        match = _same(py_fn(*case_args), c_fn(*case_args))
        t_py = best_time(py_fn, case_args, args.repeat)
        t_c = best_time(c_fn, case_args, args.repeat)
        print(f"{name:<38} {t_py * 1e3:>11.3f} {t_c * 1e3:>14.3f} {t_py / t_c:>7.1f}x  {'yes' if match else 'NO'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
