# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_fallback.py`` (same semantics)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tube_nms(const double[:, :, ::1] corners, const long long[::1] order, double thr):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t t_len = corners.shape[1]
    cdef Py_ssize_t a, b, t, i, j, nkeep = 0
    cdef double inter, iw, ih, iou
    cdef double[::1] area = np.zeros(n)
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef long long[::1] kv = keep

    for a in range(n):
        i = order[a]
        for t in range(t_len):
            area[a] += (corners[i, t, 2] - corners[i, t, 0]) * (corners[i, t, 3] - corners[i, t, 1])

    for a in range(n):
        if dead[a]:
            continue
        i = order[a]
        kv[nkeep] = i
        nkeep += 1
        for b in range(a + 1, n):
            if dead[b]:
                continue
            j = order[b]
            inter = 0.0
            for t in range(t_len):
                iw = min(corners[i, t, 2], corners[j, t, 2]) - max(corners[i, t, 0], corners[j, t, 0])
                if iw <= 0:
                    continue
                ih = min(corners[i, t, 3], corners[j, t, 3]) - max(corners[i, t, 1], corners[j, t, 1])
                if ih <= 0:
                    continue
                inter += iw * ih
            iou = inter / (area[a] + area[b] - inter)
            if iou >= thr:
                dead[b] = 1
    return keep[:nkeep].copy()


cdef inline void _edges(Py_ssize_t start, Py_ssize_t length, Py_ssize_t bins, Py_ssize_t k,
                        Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    lo[0] = start + (k * length) // bins
    hi[0] = start + ((k + 1) * length + bins - 1) // bins
    if hi[0] <= lo[0]:
        hi[0] = lo[0] + 1


def roi_pool_forward(const float[:, :, ::1] feat, const long long[:, ::1] regions, Py_ssize_t bins):
    cdef Py_ssize_t h = feat.shape[0], w = feat.shape[1], c = feat.shape[2]
    cdef Py_ssize_t r = regions.shape[0]
    out_a = np.empty((r, bins, bins, c), dtype=np.float32)
    arg_a = np.empty((r, bins, bins, c), dtype=np.int64)
    cdef float[:, :, :, ::1] out = out_a
    cdef long long[:, :, :, ::1] arg = arg_a
    cdef Py_ssize_t n, i, j, y, x, ch, ylo, yhi, xlo, xhi
    cdef float v
    with nogil:
        for n in range(r):
            for i in range(bins):
                _edges(regions[n, 0], regions[n, 1] - regions[n, 0], bins, i, &ylo, &yhi)
                for j in range(bins):
                    _edges(regions[n, 2], regions[n, 3] - regions[n, 2], bins, j, &xlo, &xhi)
                    for ch in range(c):
                        out[n, i, j, ch] = feat[ylo, xlo, ch]
                        arg[n, i, j, ch] = ylo * w + xlo
                    for y in range(ylo, yhi):
                        for x in range(xlo, xhi):
                            for ch in range(c):
                                v = feat[y, x, ch]
                                if v > out[n, i, j, ch]:
                                    out[n, i, j, ch] = v
                                    arg[n, i, j, ch] = y * w + x
    return out_a, arg_a


def roi_pool_backward(const float[:, :, :, ::1] grad_out, const long long[:, :, :, ::1] arg,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t r = grad_out.shape[0], bins = grad_out.shape[1], c = grad_out.shape[3]
    grad_a = np.zeros((h * w, c), dtype=np.float32)
    cdef float[:, ::1] grad = grad_a
    cdef Py_ssize_t n, i, j, ch
    with nogil:
        for n in range(r):
            for i in range(bins):
                for j in range(bins):
                    for ch in range(c):
                        grad[arg[n, i, j, ch], ch] += grad_out[n, i, j, ch]
    return grad_a.reshape(h, w, c)


def _displacements(int radius):
    d = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return np.array(sorted(d, key=lambda v: (v[0] * v[0] + v[1] * v[1], v[0], v[1])), dtype=np.int64)


def block_match(const float[:, :, ::1] prev, const float[:, :, ::1] nxt,
                const long long[::1] ys, const long long[::1] xs, int radius, int block):
    cdef Py_ssize_t k = ys.shape[0], c = prev.shape[2]
    cdef long long[:, ::1] disp = _displacements(radius)
    cdef Py_ssize_t nd = disp.shape[0]
    by_a = np.zeros(k, dtype=np.int64)
    bx_a = np.zeros(k, dtype=np.int64)
    cdef long long[::1] by = by_a
    cdef long long[::1] bx = bx_a
    cdef Py_ssize_t half = block // 2
    cdef Py_ssize_t n, d, y, x, ch, y0, x0, dy, dx
    cdef double sad, best
    with nogil:
        for n in range(k):
            y0 = ys[n] - half
            x0 = xs[n] - half
            best = 1e300
            for d in range(nd):
                dy = disp[d, 0]
                dx = disp[d, 1]
                sad = 0.0
                for y in range(y0, y0 + block):
                    for x in range(x0, x0 + block):
                        for ch in range(c):
                            sad += abs(<double>prev[y, x, ch] - <double>nxt[y + dy, x + dx, ch])
                    if sad >= best:
                        break
                if sad < best:
                    best = sad
                    by[n] = dy
                    bx[n] = dx
    return by_a, bx_a
