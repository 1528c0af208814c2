"""Pure numpy versions of the hot kernels.

Semantics match ``_ckernels.pyx`` exactly (same tie-breaks, same output
dtypes); ``tests/test_kernels.py`` runs both against each other.
"""

from __future__ import annotations

import numpy as np


def tube_nms(corners: np.ndarray, order: np.ndarray, thr: float) -> np.ndarray:
    """Greedy suppression over tubes in corner form ``(N, T, 4)``.

    ``order`` is the visiting order (descending score, ties resolved by the
    caller).  Returns kept indices in visiting order.
    """
    c = corners[order]
    area = ((c[..., 2] - c[..., 0]) * (c[..., 3] - c[..., 1])).sum(axis=1)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.nonzero(alive[i + 1 :])[0] + i + 1
        if rest.size == 0:
            continue
        iw = np.minimum(c[i, :, 2], c[rest, :, 2]) - np.maximum(c[i, :, 0], c[rest, :, 0])
        ih = np.minimum(c[i, :, 3], c[rest, :, 3]) - np.maximum(c[i, :, 1], c[rest, :, 1])
        inter = (np.clip(iw, 0, None) * np.clip(ih, 0, None)).sum(axis=1)
        iou = inter / (area[i] + area[rest] - inter)
        alive[rest[iou >= thr]] = False
    return np.asarray(keep, dtype=np.int64)


def _bin_edges(start: int, length: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(bins)
    lo = start + (k * length) // bins
    hi = start + -((-(k + 1) * length) // bins)
    return lo, np.maximum(hi, lo + 1)


def roi_pool_forward(feat: np.ndarray, regions: np.ndarray, bins: int):
    """Max-pool ``feat (H, W, C)`` over ``bins x bins`` cells of each region.

    ``regions`` rows are ``(y0, y1, x0, x1)`` with exclusive ends.  Returns the
    pooled values ``(R, bins, bins, C)`` and the flat ``y * W + x`` index of
    each maximum (first in row-major scan order on ties).
    """
    h, w, c = feat.shape
    r = regions.shape[0]
    out = np.empty((r, bins, bins, c), dtype=feat.dtype)
    arg = np.empty((r, bins, bins, c), dtype=np.int64)
    for n in range(r):
        y0, y1, x0, x1 = (int(v) for v in regions[n])
        ylo, yhi = _bin_edges(y0, y1 - y0, bins)
        xlo, xhi = _bin_edges(x0, x1 - x0, bins)
        for i in range(bins):
            for j in range(bins):
                patch = feat[ylo[i] : yhi[i], xlo[j] : xhi[j]]
                pw = patch.shape[1]
                flat = patch.reshape(-1, c)
                a = flat.argmax(axis=0)
                out[n, i, j] = flat[a, np.arange(c)]
                arg[n, i, j] = (ylo[i] + a // pw) * w + xlo[j] + a % pw
    return out, arg


def roi_pool_backward(grad_out: np.ndarray, arg: np.ndarray, h: int, w: int) -> np.ndarray:
    c = grad_out.shape[-1]
    grad = np.zeros((h * w, c), dtype=grad_out.dtype)
    ch = np.broadcast_to(np.arange(c), arg.shape)
    np.add.at(grad, (arg.ravel(), ch.ravel()), grad_out.ravel())
    return grad.reshape(h, w, c)


def _displacements(radius: int) -> list[tuple[int, int]]:
    d = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(d, key=lambda v: (v[0] * v[0] + v[1] * v[1], v[0], v[1]))


def block_match(prev: np.ndarray, nxt: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                radius: int, block: int):
    """Exhaustive SAD search for blocks centered at ``(ys, xs)``.

    Frames are ``(H, W, C)`` float32 already padded by ``radius + block`` on
    each side; centers are given in padded coordinates.  Candidates are
    visited smallest displacement first, so ties keep the shortest motion.
    """
    half = block // 2
    best = np.full(len(ys), np.inf)
    by = np.zeros(len(ys), dtype=np.int64)
    bx = np.zeros(len(ys), dtype=np.int64)
    hh, ww = prev.shape[:2]
    for dy, dx in _displacements(radius):
        shifted = np.zeros_like(nxt)
        ys0, ys1 = max(0, -dy), min(hh, hh - dy)
        xs0, xs1 = max(0, -dx), min(ww, ww - dx)
        shifted[ys0:ys1, xs0:xs1] = nxt[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
        diff = np.abs(prev.astype(np.float64) - shifted).sum(axis=2)
        integ = np.zeros((hh + 1, ww + 1))
        integ[1:, 1:] = diff.cumsum(0).cumsum(1)
        y0, x0 = ys - half, xs - half
        y1, x1 = y0 + block, x0 + block
        sad = integ[y1, x1] - integ[y0, x1] - integ[y1, x0] + integ[y0, x0]
        better = sad < best - 1e-9
        best[better] = sad[better]
        by[better] = dy
        bx[better] = dx
    return by, bx
