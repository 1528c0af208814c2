"""Boxes and tubes in normalized image coordinates.

A box is stored as ``(cx, cy, w, h)`` with every value in the unit range.
A tube is a ``(T, 4)`` array of boxes, one per frame of a GoP.  Corner form
``(x1, y1, x2, y2)`` is only ever a derived view.

The scalar API (:func:`box_iou`, :func:`tube_iou_3d`, ...) works on
:class:`Box` / :class:`Tube`; the ``*_matrix`` / array helpers are what the
anchor, training and evaluation code use on large candidate sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MIN_SIDE = 1e-3


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class Tube:
    """``T`` boxes, one per GoP frame, plus optional detection metadata."""

    boxes: np.ndarray
    score: float | None = None
    class_id: int | None = None
    track_id: int | None = None

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if boxes.ndim != 2 or boxes.shape[1] != 4 or boxes.shape[0] < 1:
            raise ValueError(f"tube boxes must have shape (T, 4), got {boxes.shape}")
        if np.any(boxes[:, 2:] <= 0):
            raise ValueError("tube boxes must have positive width and height")
        self.boxes = boxes

    @classmethod
    def from_boxes(cls, boxes: Iterable[Box], **meta) -> "Tube":
        return cls(np.array([b.as_array() for b in boxes]), **meta)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, t: int) -> Box:
        return Box(*map(float, self.boxes[t]))

    def centers(self) -> np.ndarray:
        return self.boxes[:, :2].copy()


# ---------------------------------------------------------------------------
# array helpers


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """``(..., 4)`` center form to corner form."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    return np.concatenate(
        [(corners[..., :2] + corners[..., 2:]) / 2.0, corners[..., 2:] - corners[..., :2]],
        axis=-1,
    )


def clamp_boxes(boxes: np.ndarray, min_side: float = MIN_SIDE) -> np.ndarray:
    """Clip corners into the unit square and enforce a minimum side length.

    A box squeezed below ``min_side`` is re-centered on its clipped center so
    it still lies inside the unit square.  Boxes already inside and large
    enough are returned bit-for-bit unchanged.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    c = to_corners(boxes)
    inside = np.all((c >= 0.0) & (c <= 1.0), axis=-1) & np.all(boxes[..., 2:] >= min_side, axis=-1)
    out = np.where(inside[..., None], boxes, from_corners(np.clip(c, 0.0, 1.0)))
    half = min_side / 2.0
    for k in (0, 1):
        small = out[..., 2 + k] < min_side
        if np.any(small):
            center = np.clip(out[..., k][small], half, 1.0 - half)
            out[..., k][small] = center
            out[..., 2 + k][small] = min_side
    return out


def pairwise_box_inter_union(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Intersection and union areas for every pair of ``a (N,4)`` and ``b (G,4)``."""
    ca = to_corners(a)[:, None, :]
    cb = to_corners(b)[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    # areas from the corner view so identical boxes intersect in exactly their area
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    return inter, area_a + area_b - inter


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union = pairwise_box_inter_union(a, b)
    return np.clip(inter / union, 0.0, 1.0)


def tube_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Volumetric 3D-IoU for every pair of tubes ``a (N,T,4)`` and ``b (G,T,4)``.

    Per-frame intersections and unions are summed over frames before dividing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"tube arrays must share (T, 4) trailing dims: {a.shape} vs {b.shape}")
    n, g = a.shape[0], b.shape[0]
    if n == 0 or g == 0:
        return np.zeros((n, g))
    ca = to_corners(a)[:, None]  # (N,1,T,4)
    cb = to_corners(b)[None]  # (1,G,T,4)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = (iw * ih).sum(axis=-1)
    area_a = ((ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])).sum(axis=-1)
    area_b = ((cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])).sum(axis=-1)
    return np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)


def union_corners(tubes: np.ndarray) -> np.ndarray:
    """Envelope of every frame's box, ``(..., T, 4)`` -> ``(..., 4)`` corners."""
    c = to_corners(tubes)
    return np.concatenate([c[..., :2].min(axis=-2), c[..., 2:].max(axis=-2)], axis=-1)


def union_cells(tubes: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Union box of each tube as integer feature-cell ranges ``(y0, y1, x0, x1)``."""
    c = np.clip(union_corners(tubes), 0.0, 1.0)
    if np.any(c[:, 2] <= c[:, 0]) or np.any(c[:, 3] <= c[:, 1]):
        raise ValueError("degenerate tube union after clamping")
    x0 = np.minimum(np.floor(c[:, 0] * grid_w), grid_w - 1)
    y0 = np.minimum(np.floor(c[:, 1] * grid_h), grid_h - 1)
    x1 = np.maximum(np.ceil(c[:, 2] * grid_w), x0 + 1)
    y1 = np.maximum(np.ceil(c[:, 3] * grid_h), y0 + 1)
    return np.stack([y0, y1, x0, x1], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# scalar API


def box_iou(a: Box, b: Box) -> float:
    return float(box_iou_matrix(a.as_array(), b.as_array())[0, 0])


def tube_iou_3d(a: Tube, b: Tube) -> float:
    if len(a) != len(b):
        raise ValueError(f"tube length mismatch: {len(a)} vs {len(b)}")
    return float(tube_iou_matrix(a.boxes[None], b.boxes[None])[0, 0])


def tube_union_box(t: Tube) -> Box:
    return Box.from_corners(*map(float, union_corners(t.boxes)))


def nms_indices(tubes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy 3D-IoU suppression on arrays; returns kept indices by descending score.

    Ties in score keep the lower input index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    corners = np.ascontiguousarray(to_corners(np.asarray(tubes, dtype=np.float64)))
    return kernels.tube_nms(corners, order, float(iou_threshold))


def tube_nms(tubes: Sequence[Tube], iou_threshold: float) -> list[Tube]:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not tubes:
        return []
    if any(t.score is None for t in tubes):
        raise ValueError("every tube passed to tube_nms needs a score")
    arr = np.stack([t.boxes for t in tubes])
    keep = nms_indices(arr, np.array([t.score for t in tubes]), iou_threshold)
    return [tubes[i] for i in keep]
