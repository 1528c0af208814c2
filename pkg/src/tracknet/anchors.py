"""Candidate anchor tubes: K-means shapes, stationary tubes, motion-tilted tubes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Tube, clamp_boxes


@dataclass(frozen=True)
class AnchorSpec:
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"anchor sides must be positive, got ({self.w}, {self.h})")


@dataclass
class MotionField:
    """Per-cell mean motion over a GoP, normalized image units per frame.

    ``mvx`` and ``mvy`` are ``(height, width)`` arrays indexed ``[row, col]``.
    """

    width: int
    height: int
    mvx: np.ndarray
    mvy: np.ndarray

    def __post_init__(self):
        self.mvx = np.asarray(self.mvx, dtype=np.float64)
        self.mvy = np.asarray(self.mvy, dtype=np.float64)
        shape = (self.height, self.width)
        if self.mvx.shape != shape or self.mvy.shape != shape:
            raise ValueError(f"motion arrays must have shape {shape}")
        if not (np.all(np.isfinite(self.mvx)) and np.all(np.isfinite(self.mvy))):
            raise ValueError("motion field entries must be finite")

    @classmethod
    def zeros(cls, width: int, height: int) -> "MotionField":
        return cls(width, height, np.zeros((height, width)), np.zeros((height, width)))

    def flipped(self) -> "MotionField":
        """Mirror for a horizontally flipped clip: columns reversed, ``mvx`` negated."""
        return MotionField(self.width, self.height, -self.mvx[:, ::-1], self.mvy[:, ::-1].copy())


# ---------------------------------------------------------------------------
# K-means over box shapes


def _shape_iou(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    inter = np.minimum(shapes[:, None, 0], centroids[None, :, 0]) * np.minimum(
        shapes[:, None, 1], centroids[None, :, 1]
    )
    union = (shapes[:, 0] * shapes[:, 1])[:, None] + (centroids[:, 0] * centroids[:, 1])[None] - inter
    return inter / union


def _kmeans_objective(shapes: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    d = 1.0 - _shape_iou(shapes, centroids)
    return float(d[np.arange(len(shapes)), assign].sum())


def kmeans_anchor_shapes(gt_boxes: Sequence[Box] | np.ndarray, m: int, seed: int = 0,
                         max_iter: int = 100, history: list | None = None) -> list[AnchorSpec]:
    """Cluster ground-truth ``(w, h)`` shapes under the ``1 - IoU`` distance.

    Boxes are compared co-centered, so only width and height matter.  The
    initial centroids come from a seeded farthest-point pass.  A centroid
    update that would raise the objective is rejected, so the within-cluster
    distance never increases; the per-iteration objective is appended to
    ``history`` when given.
    """
    if isinstance(gt_boxes, np.ndarray):
        shapes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, gt_boxes.shape[-1])[:, -2:]
    else:
        shapes = np.array([[b.w, b.h] for b in gt_boxes], dtype=np.float64)
    if len(shapes) == 0:
        raise ValueError("kmeans_anchor_shapes needs at least one box")
    if m < 1:
        raise ValueError("m must be at least 1")
    distinct = np.unique(np.round(shapes, 12), axis=0)
    if m > len(distinct):
        raise ValueError(f"m={m} exceeds the {len(distinct)} distinct box shapes")

    rng = np.random.default_rng(seed)
    centroids = [distinct[rng.integers(len(distinct))]]
    while len(centroids) < m:
        d = 1.0 - _shape_iou(distinct, np.array(centroids))
        centroids.append(distinct[int(np.argmax(d.min(axis=1)))])
    centroids = np.array(centroids)

    assign = None
    for _ in range(max_iter):
        new_assign = np.argmax(_shape_iou(shapes, centroids), axis=1)
        if history is not None:
            history.append(_kmeans_objective(shapes, centroids, new_assign))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        updated = centroids.copy()
        for k in range(m):
            members = shapes[assign == k]
            if len(members) == 0:
                continue
            candidate = updated.copy()
            candidate[k] = members.mean(axis=0)
            if _kmeans_objective(shapes, candidate, assign) <= _kmeans_objective(shapes, updated, assign):
                updated = candidate
        if np.array_equal(updated, centroids):
            if history is not None:
                history.append(_kmeans_objective(shapes, centroids, assign))
            break
        centroids = updated

    return dedupe_specs([AnchorSpec(float(w), float(h)) for w, h in centroids])


def dedupe_specs(specs: Sequence[AnchorSpec], tol: float = 1e-6) -> list[AnchorSpec]:
    out: list[AnchorSpec] = []
    for s in specs:
        if not any(abs(s.w - o.w) <= tol and abs(s.h - o.h) <= tol for o in out):
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# anchor tubes


def stationary_anchor_array(grid_w: int, grid_h: int, specs: Sequence[AnchorSpec], t: int,
                            stride: float | tuple[float, float]) -> np.ndarray:
    """``(grid_h * grid_w * M, t, 4)`` stationary tubes, row-major by cell then spec.

    ``stride`` is the normalized cell size, or ``(x, y)`` sizes for
    non-square grids.
    """
    sx, sy = (stride, stride) if np.isscalar(stride) else stride
    if grid_w < 1 or grid_h < 1:
        raise ValueError("grid dimensions must be at least 1")
    if t < 2:
        raise ValueError("GoP length must be at least 2")
    m = len(specs)
    jj, ii = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    cx = ((ii + 0.5) * sx).reshape(-1)
    cy = ((jj + 0.5) * sy).reshape(-1)
    wh = np.array([[s.w, s.h] for s in specs], dtype=np.float64)
    boxes = np.empty((grid_h * grid_w, m, 4))
    boxes[..., 0] = cx[:, None]
    boxes[..., 1] = cy[:, None]
    boxes[..., 2:] = wh[None]
    boxes = clamp_boxes(boxes.reshape(-1, 4))
    return np.repeat(boxes[:, None, :], t, axis=1)


def build_stationary_anchors(grid_w: int, grid_h: int, specs: Sequence[AnchorSpec], t: int,
                             stride: float) -> list[Tube]:
    arr = stationary_anchor_array(grid_w, grid_h, specs, t, stride)
    return [Tube(a) for a in arr]


def dominant_motion_vector(samples: Sequence[float] | np.ndarray) -> float:
    """Aggregate one axis of per-frame motion at a cell.

    The sign is a majority vote (zeros abstain, ties go positive); the result
    is the mean of the ``ceil(n/2)`` largest samples for a positive majority
    or the ``ceil(n/2)`` smallest for a negative one.
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("dominant_motion_vector needs at least one sample")
    return float(dominant_motion_batch(s[None])[0])


def dominant_motion_batch(samples: np.ndarray) -> np.ndarray:
    """Row-wise :func:`dominant_motion_vector` over ``(cells, n)`` samples."""
    s = np.asarray(samples, dtype=np.float64)
    n = s.shape[1]
    half = math.ceil(n / 2)
    positive = (s > 0).sum(axis=1) >= (s < 0).sum(axis=1)
    srt = np.sort(s, axis=1)
    top = srt[:, n - half :].mean(axis=1)
    bottom = srt[:, :half].mean(axis=1)
    return np.where(positive, top, bottom)


def tilt_anchor_array(stationary: np.ndarray, field: MotionField) -> np.ndarray:
    """Shear stationary tubes ``(N, T, 4)`` along the per-cell motion."""
    stationary = np.asarray(stationary, dtype=np.float64)
    cells = field.width * field.height
    n, t_len = stationary.shape[:2]
    if n % cells != 0:
        raise ValueError(f"{n} anchor tubes do not align with a {field.width}x{field.height} grid")
    m = n // cells
    shift = np.arange(t_len, dtype=np.float64)
    mvx = np.repeat(field.mvx.reshape(-1), m)
    mvy = np.repeat(field.mvy.reshape(-1), m)
    out = stationary.copy()
    out[..., 0] += mvx[:, None] * shift[None]
    out[..., 1] += mvy[:, None] * shift[None]
    return clamp_boxes(out)


def tilt_anchors(stationary: Sequence[Tube], field: MotionField) -> list[Tube]:
    arr = np.stack([t.boxes for t in stationary])
    if not np.allclose(arr, arr[:, :1], atol=1e-12):
        raise ValueError("tilt_anchors expects constant-box (stationary) tubes")
    return [Tube(a) for a in tilt_anchor_array(arr, field)]
