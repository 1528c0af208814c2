"""Differentiable ops on NHWC / NTHWC tensors.

Every function takes and returns :class:`~tracknet.nn.tensor.Tensor`.  The
dtype of the result follows the inputs, so the same graph runs in float32
for training and float64 for finite-difference checks.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import _fallback, kernels
from .tensor import ShapeError, Tensor, make_node, record_kinks


def _as_pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def _as_triple(v) -> tuple[int, int, int]:
    return (v, v, v) if isinstance(v, int) else tuple(v)


# ---------------------------------------------------------------------------
# elementwise / structural


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_kinks(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * mask,), "relu")


def add(*xs: Tensor) -> Tensor:
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add: shape {t.shape} does not match {shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out = out + t.data
    return make_node(out, xs, lambda g: tuple(g for _ in xs), "add")


def scale(x: Tensor, c: float) -> Tensor:
    return make_node(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),), "scale")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs input {x.shape}")
    return make_node(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,), "weighted_sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {in_shape} as {tuple(shape)}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(in_shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(out, tuple(xs), back, "concat")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``x[idx]`` along the first axis (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(x.data[idx], (x,), back, "gather")


# ---------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x (N, D) @ w (D, O) + b``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_node(out, parents, back, "linear")


def matmul_const(x: Tensor, k: np.ndarray) -> Tensor:
    """Contract the second-to-last axis of ``x (..., J, C)`` with constant ``k (J, T)``.

    Produces ``(..., T, C)``; used for the fixed endpoint interpolation kernel.
    """
    k = np.asarray(k, dtype=x.dtype)
    if x.shape[-2] != k.shape[0]:
        raise ShapeError(f"matmul_const: {x.shape} has {x.shape[-2]} rows, kernel has {k.shape[0]}")
    out = np.einsum("...jc,jt->...tc", x.data, k)
    return make_node(out, (x,), lambda g: (np.einsum("...tc,jt->...jc", g, k),), "interpolate")


def _im2col_2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[-1]
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j] = xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """NHWC convolution, weight ``(kh, kw, Cin, Cout)``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    sh, sw = _as_pair(stride)
    ph, pw = _as_pair(pad)
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xp.shape[1:3]}")
    cols = _im2col_2d(xp, kh, kw, sh, sw, ho, wo)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, i * kw + j]
            gx = gxp[:, ph : ph + h, pw : pw + wd]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, back, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """NTHWC convolution, weight ``(kt, kh, kw, Cin, Cout)``."""
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    st, sh, sw = _as_triple(stride)
    pt, ph, pw = _as_triple(pad)
    kt, kh, kw, cin, cout = w.shape
    n, t, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if min(to, ho, wo) < 1:
        raise ShapeError(f"conv3d: kernel {w.shape[:3]} larger than padded input {xp.shape[1:4]}")
    # one (rows x Cin) @ (Cin x Cout) product per kernel tap; with few input
    # channels this beats building the full im2col matrix
    taps = [(a, i, j) for a in range(kt) for i in range(kh) for j in range(kw)]

    def window(arr, a, i, j):
        return arr[:, a : a + st * to : st, i : i + sh * ho : sh, j : j + sw * wo : sw]

    out = np.zeros((n * to * ho * wo, cout), dtype=np.result_type(xp, w.data))
    for a, i, j in taps:
        out += window(xp, a, i, j).reshape(-1, cin) @ w.data[a, i, j]
    if b is not None:
        out += b.data
    out = out.reshape(n, to, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty(w.shape, dtype=g.dtype)
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for a, i, j in taps:
            gw[a, i, j] = window(xp, a, i, j).reshape(-1, cin).T @ g2
            if gxp is not None:
                window(gxp, a, i, j)[...] += (g2 @ w.data[a, i, j].T).reshape(n, to, ho, wo, cin)
        gx = None if gxp is None else gxp[:, pt : pt + t, ph : ph + h, pw : pw + wd]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, back, "conv3d")


# ---------------------------------------------------------------------------
# pooling


def _window_pool(x: Tensor, window: Sequence[int], op: str) -> Tensor:
    """Non-overlapping max pool over the leading spatial(/temporal) axes.

    Trailing remainders that do not fill a window are dropped.  Ties go to the
    first element in scan order.
    """
    nd = len(window)
    shape = x.shape
    spatial = shape[1 : 1 + nd]
    outs = [s // k for s, k in zip(spatial, window)]
    if min(outs) < 1:
        raise ShapeError(f"{op}: window {tuple(window)} larger than input {spatial}")
    crop = (slice(None),) + tuple(slice(0, o * k) for o, k in zip(outs, window))
    xc = x.data[crop]
    split = [shape[0]]
    for o, k in zip(outs, window):
        split += [o, k]
    split.append(shape[-1])
    xr = xc.reshape(split)
    # (N, o1, k1, o2, k2, ..., C) -> (N, o1, o2, ..., C, k1, k2, ...)
    perm = [0] + [1 + 2 * i for i in range(nd)] + [2 * nd + 1] + [2 + 2 * i for i in range(nd)]
    xt = xr.transpose(perm)
    flat = xt.reshape(xt.shape[: nd + 2] + (-1,))
    arg = flat.argmax(axis=-1)
    record_kinks(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def back(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx_c = gflat.reshape(xt.shape).transpose(inv).reshape(xc.shape)
        if gx_c.shape == shape:
            return (gx_c,)
        gx = np.zeros(shape, dtype=g.dtype)
        gx[crop] = gx_c
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), back, op)


def max_pool2d(x: Tensor, k=2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NHWC input, got {x.shape}")
    return _window_pool(x, _as_pair(k), "maxpool2d")


def max_pool3d(x: Tensor, k) -> Tensor:
    """Spatiotemporal max pool on NTHWC, ``k = (kt, kh, kw)``."""
    if x.data.ndim != 5:
        raise ShapeError(f"max_pool3d: expected NTHWC input, got {x.shape}")
    return _window_pool(x, _as_triple(k), "maxpool3d")


def roi_pool(x: Tensor, regions: np.ndarray, bins: int = 7) -> Tensor:
    """Max-pool ``x (H, W, C)`` into ``bins x bins`` per region.

    ``regions`` rows are integer ``(y0, y1, x0, x1)`` cell ranges (exclusive
    ends).  Gradients route to the argmax cell of each bin.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"roi_pool: expected (H, W, C) input, got {x.shape}")
    h, w, _ = x.shape
    regions = np.ascontiguousarray(regions, dtype=np.int64).reshape(-1, 4)
    if np.any(regions[:, 1] <= regions[:, 0]) or np.any(regions[:, 3] <= regions[:, 2]):
        raise ShapeError("roi_pool: empty region")
    if np.any(regions[:, [0, 2]] < 0) or np.any(regions[:, 1] > h) or np.any(regions[:, 3] > w):
        raise ShapeError("roi_pool: region outside the feature map")
    impl = kernels if x.dtype == np.float32 else _fallback
    out, arg = impl.roi_pool_forward(np.ascontiguousarray(x.data), regions, bins)
    record_kinks(arg)

    def back(g):
        return (impl.roi_pool_backward(np.ascontiguousarray(g, dtype=x.dtype), arg, h, w),)

    return make_node(out, (x,), back, "roi_pool")


def roi_pool_union(x: Tensor, tube, bins: int = 7) -> Tensor:
    """Pool the cells covered by the union box of ``tube`` into ``bins x bins``.

    ``tube`` is a :class:`Tube` or a ``(T, 4)`` array of normalized boxes.
    Returns ``(bins, bins, C)``.
    """
    from ..geometry import union_cells

    boxes = np.asarray(getattr(tube, "boxes", tube), dtype=np.float64)
    region = union_cells(boxes[None], x.shape[0], x.shape[1])
    return reshape(roi_pool(x, region, bins), (bins, bins, x.shape[2]))


# ---------------------------------------------------------------------------
# spatial transformer sampling


def affine_sample(x: Tensor, theta: Tensor, out_h: int | None = None, out_w: int | None = None) -> Tensor:
    """Bilinear sampling of ``x (N, H, W, C)`` on an affine-warped grid.

    ``theta (N, 6)`` maps normalized output coordinates in ``[-1, 1]^2``
    (corners at pixel centers) to normalized input coordinates.  Every
    channel is sampled identically; samples outside the input read zero.
    """
    if x.data.ndim != 4 or theta.shape != (x.shape[0], 6):
        raise ShapeError(f"affine_sample: input {x.shape} / theta {theta.shape} mismatch")
    n, h, w, c = x.shape
    out_h = out_h or h
    out_w = out_w or w
    dt = x.dtype
    th = theta.data.astype(np.float64)
    # pixel-space form of the normalized affine map; exact for the identity
    xn = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    yn = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    gy, gx = np.meshgrid(yn, xn, indexing="ij")
    sx = (w - 1) / 2.0
    sy = (h - 1) / 2.0
    if out_w == w and out_h == h:
        px = np.arange(w, dtype=np.float64)[None, :].repeat(h, 0)
        py = np.arange(h, dtype=np.float64)[:, None].repeat(w, 1)
        u = (th[:, 0, None, None] * px + th[:, 1, None, None] * (gy * sx + sx)
             + sx * (th[:, 2, None, None] + 1.0 - th[:, 0, None, None] - th[:, 1, None, None]))
        v = (th[:, 3, None, None] * (gx * sy + sy) + th[:, 4, None, None] * py
             + sy * (th[:, 5, None, None] + 1.0 - th[:, 3, None, None] - th[:, 4, None, None]))
    else:
        u = (th[:, 0, None, None] * gx + th[:, 1, None, None] * gy + th[:, 2, None, None] + 1.0) * sx
        v = (th[:, 3, None, None] * gx + th[:, 4, None, None] * gy + th[:, 5, None, None] + 1.0) * sy

    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    record_kinks(x0, y0)
    fx = u - x0
    fy = v - y0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = np.where(valid, yy * w + xx, 0)
        wy = fy if dy else 1.0 - fy
        wx = fx if dx else 1.0 - fx
        corners.append((flat, valid, wy, wx))
    xf = x.data.reshape(n, h * w, c)
    bidx = np.arange(n)[:, None, None]

    vals = []
    out = np.zeros((n, out_h, out_w, c), dtype=np.float64)
    for flat, valid, wy, wx in corners:
        val = xf[bidx, flat] * valid[..., None]
        vals.append(val)
        out += (wy * wx)[..., None] * val

    def back(g):
        g64 = g.astype(np.float64)
        gx_in = None
        if x.requires_grad:
            acc = np.zeros((n, h * w, c), dtype=np.float64)
            for flat, valid, wy, wx in corners:
                contrib = g64 * ((wy * wx) * valid)[..., None]
                for b in range(n):
                    np.add.at(acc[b], flat[b].ravel(), contrib[b].reshape(-1, c))
            gx_in = acc.reshape(n, h, w, c).astype(dt)
        v00, v01, v10, v11 = vals
        du = ((1.0 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10))
        dv = ((1.0 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01))
        gu = (g64 * du).sum(axis=-1)
        gv = (g64 * dv).sum(axis=-1)
        # du/dtheta, dv/dtheta in the normalized parameterization
        gth = np.stack([
            (gu * gx * sx).sum(axis=(1, 2)),
            (gu * gy * sx).sum(axis=(1, 2)),
            (gu * sx).sum(axis=(1, 2)),
            (gv * gx * sy).sum(axis=(1, 2)),
            (gv * gy * sy).sum(axis=(1, 2)),
            (gv * sy).sum(axis=(1, 2)),
        ], axis=1)
        return gx_in, gth.astype(theta.dtype)

    return make_node(out.astype(dt), (x, theta), back, "affine_sample")


# ---------------------------------------------------------------------------
# loss heads


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weight: float | None = None) -> Tensor:
    """Mean cross-entropy of ``logits (N, K)`` against integer ``labels``.

    ``weight`` overrides the ``1/N`` normalizer.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    norm = (1.0 / n) if weight is None else weight
    loss = (lse - z[np.arange(n), labels]).sum() * norm
    prob = np.exp(z - lse[:, None])

    def back(g):
        d = prob.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * norm * float(g)).astype(logits.dtype),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_xent")


def smooth_l1_loss(pred: Tensor, target: np.ndarray, normalizer: float = 1.0, beta: float = 1.0) -> Tensor:
    """``sum(smooth_l1(pred - target)) / normalizer``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1_loss: prediction {pred.shape} vs target {target.shape}")
    d = pred.data.astype(np.float64) - target
    ad = np.abs(d)
    quad = ad < beta
    record_kinks(quad, d > 0)
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / normalizer

    def back(g):
        grad = np.where(quad, d / beta, np.sign(d)) / normalizer * float(g)
        return (grad.astype(pred.dtype),)

    return make_node(np.asarray(loss, dtype=pred.dtype), (pred,), back, "smooth_l1")


def tv_penalty(offsets: Tensor) -> Tensor:
    """Mean absolute first difference along the frame axis of ``(N, T, 4)``, averaged over N."""
    if offsets.data.ndim != 3 or offsets.shape[1] < 2:
        raise ShapeError(f"tv_penalty: expected (N, T>=2, C), got {offsets.shape}")
    n, t, c = offsets.shape
    if n == 0:
        return Tensor(np.zeros((), dtype=offsets.dtype))
    diff = np.diff(offsets.data.astype(np.float64), axis=1)
    denom = n * (t - 1) * c
    record_kinks(diff > 0)
    loss = np.abs(diff).sum() / denom

    def back(g):
        s = np.sign(diff) / denom * float(g)
        grad = np.zeros((n, t, c))
        grad[:, 1:] += s
        grad[:, :-1] -= s
        return (grad.astype(offsets.dtype),)

    return make_node(np.asarray(loss, dtype=offsets.dtype), (offsets,), back, "tv_smooth")
