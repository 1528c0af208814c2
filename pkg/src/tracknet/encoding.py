"""Tube offset encoding, endpoint interpolation, anchor labeling and losses.

Offsets for a tube are a ``(T, 4)`` array of ``(dx, dy, dw, dh)`` per frame:
center shifts relative to the anchor size and log size ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .geometry import Tube, clamp_boxes, tube_iou_matrix

POS_IOU = 0.5
NEG_IOU_LO = 0.05
NEG_IOU_HI = 0.3
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 1.0, 0.001)
# exp() guard; far beyond any ratio reachable inside the unit square
_MAX_LOG_RATIO = 10.0


class AnchorLabel(IntEnum):
    NEGATIVE = -1
    IGNORE = 0
    POSITIVE = 1


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_tube_targets` over ``(..., T, 4)`` pairs."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    if a.shape != g.shape:
        raise ValueError(f"anchor/gt shape mismatch: {a.shape} vs {g.shape}")
    if np.any(g[..., 2:] <= 0):
        raise ValueError("ground-truth boxes need positive width and height")
    out = np.empty_like(a)
    out[..., 0] = (g[..., 0] - a[..., 0]) / a[..., 2]
    out[..., 1] = (g[..., 1] - a[..., 1]) / a[..., 3]
    out[..., 2] = np.log(g[..., 2] / a[..., 2])
    out[..., 3] = np.log(g[..., 3] / a[..., 3])
    return out


def decode_array(anchors: np.ndarray, offsets: np.ndarray, clamp: bool = True) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(offsets, dtype=np.float64)
    if a.shape != d.shape:
        raise ValueError(f"anchor/offset shape mismatch: {a.shape} vs {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("offsets must be finite")
    out = np.empty_like(a)
    out[..., 0] = a[..., 0] + d[..., 0] * a[..., 2]
    out[..., 1] = a[..., 1] + d[..., 1] * a[..., 3]
    out[..., 2] = a[..., 2] * np.exp(np.clip(d[..., 2], -_MAX_LOG_RATIO, _MAX_LOG_RATIO))
    out[..., 3] = a[..., 3] * np.exp(np.clip(d[..., 3], -_MAX_LOG_RATIO, _MAX_LOG_RATIO))
    return clamp_boxes(out) if clamp else out


def encode_tube_targets(anchor: Tube, gt: Tube) -> np.ndarray:
    if len(anchor) != len(gt):
        raise ValueError(f"tube length mismatch: {len(anchor)} vs {len(gt)}")
    return encode_array(anchor.boxes, gt.boxes)


def decode_tube_offsets(anchor: Tube, offsets: np.ndarray, clamp: bool = True) -> Tube:
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != anchor.boxes.shape:
        raise ValueError(f"offsets shape {offsets.shape} does not match tube {anchor.boxes.shape}")
    return Tube(decode_array(anchor.boxes, offsets, clamp=clamp))


def interpolation_kernel(t_len: int) -> np.ndarray:
    """``(2, t_len)`` weights blending first-frame and last-frame offsets."""
    if t_len < 2:
        raise ValueError(f"interpolation needs at least 2 frames, got {t_len}")
    t = np.arange(t_len, dtype=np.float64)
    return np.stack([(t_len - 1 - t) / (t_len - 1), t / (t_len - 1)])


def expand_endpoint_offsets(first: Sequence[float], last: Sequence[float], t_len: int) -> np.ndarray:
    k = interpolation_kernel(t_len)
    first = np.asarray(first, dtype=np.float64)
    last = np.asarray(last, dtype=np.float64)
    out = k[0][:, None] * first[None] + k[1][:, None] * last[None]
    # the kernel's end columns are exactly (1, 0) and (0, 1); keep endpoints bit-exact
    out[0] = first
    out[-1] = last
    return out


def label_anchor_array(anchors: np.ndarray, gts: np.ndarray, pos: float = POS_IOU,
                       neg_lo: float = NEG_IOU_LO, neg_hi: float = NEG_IOU_HI,
                       iou: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Label ``(N, T, 4)`` anchors against ``(G, T, 4)`` ground truth.

    Returns ``labels`` in {+1, -1, 0} and the matched gt index (``-1`` unless
    positive).  Every gt's best anchor is forced positive and matched to
    that gt, as long as there are at least as many anchors as gts.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gts) == 0:
        return labels, matched
    if iou is None:
        iou = tube_iou_matrix(anchors, gts)
    best_gt = np.argmax(iou, axis=1)
    best = iou[np.arange(n), best_gt]
    labels[(best >= neg_lo) & (best < neg_hi)] = AnchorLabel.NEGATIVE
    positive = best >= pos
    labels[positive] = AnchorLabel.POSITIVE
    matched[positive] = best_gt[positive]
    # each gt claims its best anchor; a gt whose best anchor is already
    # claimed by a lower-index gt takes its best unclaimed one
    claimed = np.zeros(n, dtype=bool)
    for g in range(iou.shape[1]):
        col = np.where(claimed, -np.inf, iou[:, g])
        k = int(np.argmax(col))
        if claimed[k]:
            continue
        claimed[k] = True
        labels[k] = AnchorLabel.POSITIVE
        matched[k] = g
    return labels, matched


def assign_anchor_labels(anchors: Sequence[Tube], gts: Sequence[Tube]) -> list[tuple[AnchorLabel, int | None]]:
    if not anchors:
        return []
    a = np.stack([t.boxes for t in anchors])
    g = np.stack([t.boxes for t in gts]) if gts else np.zeros((0,) + a.shape[1:])
    labels, matched = label_anchor_array(a, g)
    return [(AnchorLabel(int(l)), int(m) if m >= 0 else None) for l, m in zip(labels, matched)]


# ---------------------------------------------------------------------------
# losses (reference numpy forms; the training graph uses nn.ops equivalents)


def smooth_l1(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smoothness_penalty(offsets: np.ndarray) -> float:
    """Mean absolute frame-to-frame change of ``(T, 4)`` (or ``(N, T, 4)``, averaged) offsets."""
    o = np.asarray(offsets, dtype=np.float64)
    if o.ndim == 2:
        o = o[None]
    if o.shape[1] < 2:
        raise ValueError("smoothness needs at least 2 frames")
    if o.shape[0] == 0:
        return 0.0
    return float(np.abs(np.diff(o, axis=1)).mean())


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy via a max-shifted log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} do not match labels {labels.shape}")
    if len(z) == 0:
        return 0.0
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float((lse - z[np.arange(len(z)), labels]).mean())


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    cls_tpn: float
    reg_tpn: float
    smooth: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "cls": self.cls, "reg": self.reg, "cls_tpn": self.cls_tpn,
            "reg_tpn": self.reg_tpn, "smooth": self.smooth, "total": self.total,
        }


def regression_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Smooth-L1 summed over frames and channels, averaged over tubes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} does not match target {target.shape}")
    if len(pred) == 0:
        return 0.0
    return float(smooth_l1(pred - target).sum() / len(pred))


def total_loss(cls_scores: np.ndarray, tpn_scores: np.ndarray, pred_offsets: np.ndarray,
               tpn_offsets: np.ndarray, labels: tuple[np.ndarray, np.ndarray],
               targets: tuple[np.ndarray, np.ndarray],
               weights: Sequence[float] = DEFAULT_WEIGHTS,
               smooth_post: bool = True, smooth_tpn: bool = False) -> LossBreakdown:
    """Multi-task loss over one sampled batch of proposals and anchors.

    ``cls_scores (P, K+1)`` / ``tpn_scores (A, 2)`` are logits and
    ``labels = (class ids (P,), objectness (A,) in {0, 1})``.  Offsets and
    ``targets = (post targets (P, T, 4), tpn targets (A, T, 4))`` are compared
    on positives only (class > 0, objectness 1).  The smoothness term covers
    the positive predictions of whichever stages run in predict-all mode.
    """
    if len(weights) != 5:
        raise ValueError("weights must be (l1, l2, l3, l4, l5)")
    cls_labels, tpn_labels = (np.asarray(l, dtype=np.int64) for l in labels)
    post_t, tpn_t = targets
    pos_post = cls_labels > 0
    pos_tpn = tpn_labels == 1
    l_cls = cross_entropy(cls_scores, cls_labels)
    l_cls_tpn = cross_entropy(tpn_scores, tpn_labels)
    l_reg = regression_loss(np.asarray(pred_offsets)[pos_post], np.asarray(post_t)[pos_post])
    l_reg_tpn = regression_loss(np.asarray(tpn_offsets)[pos_tpn], np.asarray(tpn_t)[pos_tpn])
    l_smooth = 0.0
    if smooth_post and pos_post.any():
        l_smooth += smoothness_penalty(np.asarray(pred_offsets)[pos_post])
    if smooth_tpn and pos_tpn.any():
        l_smooth += smoothness_penalty(np.asarray(tpn_offsets)[pos_tpn])
    w1, w2, w3, w4, w5 = weights
    total = w1 * l_cls + w2 * l_reg + w3 * l_cls_tpn + w4 * l_reg_tpn + w5 * l_smooth
    return LossBreakdown(l_cls, l_reg, l_cls_tpn, l_reg_tpn, l_smooth, total)
