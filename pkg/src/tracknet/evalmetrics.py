"""COCO-style frame-level AP/AR over detected tubes, plus tube-level AP under 3D-IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Tube, box_iou_matrix, tube_iou_matrix

IOU_SWEEP = tuple(round(0.10 + 0.05 * i, 2) for i in range(18))
AR_IOUS = (0.10, 0.30, 0.50)
MAX_DETS = (1, 10, 100)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}
BUCKETS = ("small", "medium", "large")


@dataclass
class ScoredBox:
    box: np.ndarray
    score: float
    class_id: int
    track_id: int | None = None


@dataclass
class FrameRecord:
    """Detections and ground truth of one frame (or one GoP, for tube matching)."""

    det_boxes: np.ndarray
    det_scores: np.ndarray
    det_cls: np.ndarray
    gt_boxes: np.ndarray
    gt_cls: np.ndarray

    def __post_init__(self):
        self.det_scores = np.asarray(self.det_scores, dtype=np.float64).reshape(-1)
        self.det_cls = np.asarray(self.det_cls, dtype=np.int64).reshape(-1)
        self.gt_cls = np.asarray(self.gt_cls, dtype=np.int64).reshape(-1)
        self.det_boxes = np.asarray(self.det_boxes, dtype=np.float64)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64)
        if len(self.det_boxes) != len(self.det_scores) or len(self.det_boxes) != len(self.det_cls):
            raise ValueError("detection boxes, scores and classes must align")
        if len(self.gt_boxes) != len(self.gt_cls):
            raise ValueError("gt boxes and classes must align")

    @classmethod
    def from_boxes(cls, dets: Sequence[ScoredBox], gts: Sequence[tuple[np.ndarray, int]]) -> "FrameRecord":
        return cls(np.array([d.box for d in dets]).reshape(-1, 4), [d.score for d in dets],
                   [d.class_id for d in dets], np.array([g[0] for g in gts]).reshape(-1, 4),
                   [g[1] for g in gts])


def tube_to_frame_detections(dets: Sequence, t_len: int | None = None) -> list[list[ScoredBox]]:
    """Split tubes (``Detection`` or ``Tube``) into per-frame scored boxes."""
    if not dets:
        return [[] for _ in range(t_len or 0)]
    tubes = [getattr(d, "tube", d) for d in dets]
    t = len(tubes[0])
    if t_len is not None and t != t_len:
        raise ValueError(f"tubes have {t} frames, expected {t_len}")
    out: list[list[ScoredBox]] = [[] for _ in range(t)]
    for d, tube in zip(dets, tubes):
        score = float(getattr(d, "score", tube.score if tube.score is not None else 0.0))
        cls = int(getattr(d, "class_id", tube.class_id if tube.class_id is not None else 1))
        for f in range(t):
            out[f].append(ScoredBox(tube.boxes[f].copy(), score, cls, tube.track_id))
    return out


# ---------------------------------------------------------------------------
# matching


def _greedy_match(ious: np.ndarray, thresholds: Sequence[float],
                  gt_ignore: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match score-sorted detections (rows of ``ious``) at every threshold at once.

    Each detection takes the highest-IoU unmatched gt at or above the
    threshold, preferring non-ignored gts; IoU ties go to the lower gt index.
    Returns matched gt indices ``(len(thresholds), D)`` (-1 if none) and
    whether each match is to an ignored gt.
    """
    thr = np.asarray(thresholds, dtype=np.float64)[:, None]
    d, g = ious.shape
    match = np.full((len(thr), d), -1, dtype=np.int64)
    taken = np.zeros((len(thr), g), dtype=bool)
    if g == 0:
        return match, np.zeros_like(match, dtype=bool)
    rows = np.arange(len(thr))
    for i in range(d):
        ok = (ious[i][None] >= thr - 1e-12) & ~taken
        for ignored in (False, True):
            cand = ok & (gt_ignore == ignored)[None] & (match[:, i] < 0)[:, None]
            has = cand.any(axis=1)
            if not has.any():
                continue
            best = np.where(cand, ious[i][None], -1.0).argmax(axis=1)
            match[has, i] = best[has]
            taken[rows[has], best[has]] = True
    matched_ig = np.where(match >= 0, gt_ignore[np.maximum(match, 0)], False)
    return match, matched_ig


def score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score order; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray,
                     iou_thr: float) -> np.ndarray:
    """True-positive flag per detection (input order) under greedy score-order matching."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(det_scores)
    ious = box_iou_matrix(det_boxes[order], gt_boxes)
    match, _ = _greedy_match(ious, [iou_thr], np.zeros(len(gt_boxes), dtype=bool))
    tp = np.zeros(len(det_boxes), dtype=bool)
    tp[order] = match[0] >= 0
    return tp


# ---------------------------------------------------------------------------
# accumulation


@dataclass
class _Bucket:
    """Concatenated per-image results for one (class, area range)."""

    scores: list = field(default_factory=list)
    tp: list = field(default_factory=list)      # (nthr, D_img) arrays
    ignore: list = field(default_factory=list)  # (nthr, D_img) arrays
    n_gt: int = 0


def _evaluate_image(ious: np.ndarray, scores: np.ndarray, det_area: np.ndarray, gt_area: np.ndarray,
                    area: tuple[float, float], thresholds: Sequence[float], max_det: int):
    order = score_order(scores)[:max_det]
    gt_ig = (gt_area < area[0]) | (gt_area > area[1])
    match, matched_ig = _greedy_match(ious[order], thresholds, gt_ig)
    d_out = (det_area[order] < area[0]) | (det_area[order] > area[1])
    ignore = matched_ig | ((match < 0) & d_out[None])
    return scores[order], match >= 0, ignore, int((~gt_ig).sum())


def _pr_summary(bucket: _Bucket, max_det: int, n_thr: int) -> tuple[np.ndarray, np.ndarray]:
    """AP (101-point) and final recall per threshold; ``nan`` when no gt counts."""
    ap = np.full(n_thr, np.nan)
    rec = np.full(n_thr, np.nan)
    if bucket.n_gt == 0:
        return ap, rec
    if bucket.scores:
        scores = np.concatenate([s[:max_det] for s in bucket.scores])
        tp = np.concatenate([t[:, :max_det] for t in bucket.tp], axis=1)
        ig = np.concatenate([g[:, :max_det] for g in bucket.ignore], axis=1)
    else:
        scores, tp, ig = np.zeros(0), np.zeros((n_thr, 0), bool), np.zeros((n_thr, 0), bool)
    order = score_order(scores)
    tp, ig = tp[:, order], ig[:, order]
    tps = np.cumsum(tp & ~ig, axis=1, dtype=np.float64)
    fps = np.cumsum(~tp & ~ig, axis=1, dtype=np.float64)
    for k in range(n_thr):
        keep = ~ig[k]
        tpc, fpc = tps[k][keep], fps[k][keep]
        if len(tpc) == 0:
            ap[k] = 0.0
            rec[k] = 0.0
            continue
        rc = tpc / bucket.n_gt
        pr = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        idx = np.searchsorted(rc, RECALL_POINTS, side="left")
        q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
        ap[k] = q.mean()
        rec[k] = rc[-1]
    return ap, rec


def _class_mean(values: list[np.ndarray]) -> np.ndarray:
    """Mean over classes, ignoring classes without ground truth; 0 when none has any."""
    if not values:
        return np.zeros(0)
    stack = np.stack(values)
    defined = ~np.isnan(stack)
    n = defined.sum(axis=0)
    total = np.where(defined, stack, 0.0).sum(axis=0)
    return np.where(n > 0, total / np.maximum(n, 1), 0.0)


def _fmt(t: float) -> str:
    return f"{t:.2f}"


@dataclass
class DetectionReport:
    ap_mean: float
    ap_at: dict[str, float]
    ar_at: dict[str, float]
    ap_area: dict[str, float]
    ar_area: dict[str, float]
    ar_maxdets: dict[str, float]
    counts: dict[str, int]
    empty_gt: bool
    extension: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap_mean": self.ap_mean,
            "ap_at": dict(self.ap_at),
            "ar_at": dict(self.ar_at),
            "ap_area": dict(self.ap_area),
            "ar_area": dict(self.ar_area),
            "ar_maxdets": dict(self.ar_maxdets),
            "counts": dict(self.counts),
            "empty_gt": self.empty_gt,
            "extension": dict(self.extension),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _accumulate(records: Sequence[FrameRecord], iou_fn, area_fn, areas: dict[str, tuple[float, float]],
                thresholds: Sequence[float], max_det: int) -> dict[tuple[int, str], _Bucket]:
    classes = sorted({int(c) for r in records for c in np.concatenate([r.det_cls, r.gt_cls])})
    buckets = {(c, a): _Bucket() for c in classes for a in areas}
    for r in records:
        for c in classes:
            dm = r.det_cls == c
            gm = r.gt_cls == c
            if not dm.any() and not gm.any():
                continue
            db, gb = r.det_boxes[dm], r.gt_boxes[gm]
            ious = iou_fn(db, gb) if len(db) and len(gb) else np.zeros((len(db), len(gb)))
            da, ga = area_fn(db), area_fn(gb)
            for a, rng in areas.items():
                s, tp, ig, n = _evaluate_image(ious, r.det_scores[dm], da, ga, rng, thresholds, max_det)
                b = buckets[(c, a)]
                b.n_gt += n
                if len(s):
                    b.scores.append(s)
                    b.tp.append(tp)
                    b.ignore.append(ig)
    return buckets


def compute_report(records: Sequence[FrameRecord], image_size: tuple[int, int],
                   tube_records: Sequence[FrameRecord] | None = None,
                   thresholds: Sequence[float] = IOU_SWEEP) -> DetectionReport:
    """Frame-level COCO-style report over per-frame ``records``.

    ``image_size`` is ``(width, height)`` in pixels, used for the area
    buckets.  ``tube_records`` (one per GoP, boxes as ``(T, 4)`` tubes) add
    the tube-level AP extension.
    """
    thresholds = tuple(float(t) for t in thresholds)
    width, height = image_size
    px = float(width) * float(height)

    def area_fn(b):
        return b[:, 2] * b[:, 3] * px if len(b) else np.zeros(0)

    buckets = _accumulate(records, box_iou_matrix, area_fn, AREA_RANGES, thresholds, max(MAX_DETS))
    classes = sorted({c for c, _ in buckets})
    n_thr = len(thresholds)

    def summary(area: str, max_det: int):
        aps, recs = [], []
        for c in classes:
            ap, rec = _pr_summary(buckets[(c, area)], max_det, n_thr)
            aps.append(ap)
            recs.append(rec)
        if not classes:
            return np.zeros(n_thr), np.zeros(n_thr)
        return _class_mean(aps), _class_mean(recs)

    ap_all, rec_all = summary("all", 100)
    ap_at = {_fmt(t): float(v) for t, v in zip(thresholds, ap_all)}
    ar_at = {}
    for t in AR_IOUS:
        # AR at a threshold outside the sweep gets its own pass
        if any(abs(t - s) < 1e-9 for s in thresholds):
            ar_at[_fmt(t)] = float(rec_all[[abs(t - s) < 1e-9 for s in thresholds].index(True)])
        else:
            sub = _accumulate(records, box_iou_matrix, area_fn, {"all": AREA_RANGES["all"]}, (t,), 100)
            r = [_pr_summary(sub[(c, "all")], 100, 1)[1] for c in classes]
            ar_at[_fmt(t)] = float(_class_mean(r)[0]) if r else 0.0
    ap_area, ar_area = {}, {}
    for a in BUCKETS:
        ap, rec = summary(a, 100)
        ap_area[a] = float(ap.mean()) if n_thr else 0.0
        ar_area[a] = float(rec.mean()) if n_thr else 0.0
    ar_maxdets = {str(m): float(summary("all", m)[1].mean()) for m in MAX_DETS}

    n_gt = int(sum(len(r.gt_boxes) for r in records))
    counts = {"frames": len(records), "gt": n_gt, "detections": int(sum(len(r.det_boxes) for r in records))}
    for a in BUCKETS:
        counts[f"gt_{a}"] = int(sum(buckets[(c, a)].n_gt for c in classes))

    ext = {}
    if tube_records is not None:
        tb = _accumulate(tube_records, tube_iou_matrix, lambda b: np.zeros(len(b)),
                         {"all": AREA_RANGES["all"]}, thresholds, max(MAX_DETS))
        tubes_ap = [_pr_summary(tb[(c, "all")], 100, n_thr)[0] for c in sorted({c for c, _ in tb})]
        tap = _class_mean(tubes_ap) if tubes_ap else np.zeros(n_thr)
        ext = {"label": "extension: tube-level AP under 3D-IoU matching",
               "tube_ap_mean": float(tap.mean()),
               "tube_ap_at": {_fmt(t): float(v) for t, v in zip(thresholds, tap)}}

    return DetectionReport(float(ap_all.mean()), ap_at, ar_at, ap_area, ar_area, ar_maxdets,
                           counts, n_gt == 0, ext)


def clip_records(gt_tubes: Sequence[Tube], dets: Sequence, t_len: int) -> tuple[list[FrameRecord], FrameRecord]:
    """Per-frame records plus the tube-level record for one GoP."""
    per_frame = tube_to_frame_detections(dets, t_len)
    frames = []
    for f in range(t_len):
        gts = [(g.boxes[f], 1 if g.class_id is None else int(g.class_id)) for g in gt_tubes]
        frames.append(FrameRecord.from_boxes(per_frame[f], gts))
    tubes = [getattr(d, "tube", d) for d in dets]
    tube_rec = FrameRecord(
        np.array([t.boxes for t in tubes]).reshape(-1, t_len, 4),
        [float(getattr(d, "score", 0.0)) for d in dets],
        [int(getattr(d, "class_id", 1)) for d in dets],
        np.array([g.boxes for g in gt_tubes]).reshape(-1, t_len, 4),
        [1 if g.class_id is None else int(g.class_id) for g in gt_tubes],
    )
    return frames, tube_rec


def evaluate(pairs: Iterable[tuple[Sequence[Tube], Sequence]], t_len: int,
             image_size: tuple[int, int]) -> DetectionReport:
    """Report over ``(gt tubes, detections)`` pairs, one pair per GoP."""
    frames, tubes = [], []
    for gts, dets in pairs:
        f, t = clip_records(gts, dets, t_len)
        frames.extend(f)
        tubes.append(t)
    return compute_report(frames, image_size, tubes)
