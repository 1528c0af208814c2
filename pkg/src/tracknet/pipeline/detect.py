"""Anchor sets, proposal generation, refinement and GoP-level detection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..anchors import AnchorSpec, MotionField, stationary_anchor_array, tilt_anchor_array
from ..data import GoPClip, estimate_motion_block_matching, gt_motion_field
from ..encoding import decode_array
from ..evalmetrics import DetectionReport, evaluate
from ..geometry import Tube, nms_indices, union_cells
from ..nn import serialize
from .config import ModelConfig
from .network import TrackNet


@dataclass
class Detection:
    tube: Tube
    class_id: int
    score: float
    tracklet: np.ndarray

    @classmethod
    def from_tube(cls, tube: Tube) -> "Detection":
        return cls(tube, int(tube.class_id), float(tube.score), tube.centers())


def anchor_tubes(cfg: ModelConfig, specs: Sequence[AnchorSpec], field: MotionField | None) -> np.ndarray:
    """Candidate set ``(cells * anchors_per_cell, T, 4)`` in head order.

    Within a cell the stationary shapes come first, then their tilted
    counterparts, when both sets are enabled.
    """
    cells = cfg.grid_h * cfg.grid_w
    m = len(specs)
    stat = stationary_anchor_array(cfg.grid_w, cfg.grid_h, specs, cfg.gop_len,
                                   (1.0 / cfg.grid_w, 1.0 / cfg.grid_h))
    if cfg.anchor_sets == "stationary":
        return stat
    if field is None:
        field = MotionField.zeros(cfg.grid_w, cfg.grid_h)
    tilt = tilt_anchor_array(stat, field)
    if cfg.anchor_sets == "tilted":
        return tilt
    t = cfg.gop_len
    both = np.concatenate([stat.reshape(cells, m, t, 4), tilt.reshape(cells, m, t, 4)], axis=1)
    return both.reshape(-1, t, 4)


def motion_for_clip(cfg: ModelConfig, clip: GoPClip) -> MotionField:
    if cfg.anchor_sets == "stationary":
        return MotionField.zeros(cfg.grid_w, cfg.grid_h)
    if cfg.motion_source == "gt":
        return gt_motion_field(clip, cfg.grid_w, cfg.grid_h)
    return estimate_motion_block_matching(clip.frames, (cfg.grid_w, cfg.grid_h),
                                          cfg.search_radius, cfg.block_size)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def propose(scores: np.ndarray, offsets: np.ndarray, anchors: np.ndarray, top_k: int,
            nms_thr: float, pre_nms_top_n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Decode, rank by objectness, suppress, truncate; returns ``(tubes, scores)``."""
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if pre_nms_top_n is not None:
        order = order[:pre_nms_top_n]
    boxes = decode_array(anchors[order], offsets[order])
    keep = nms_indices(boxes, scores[order], nms_thr)[:top_k]
    return boxes[keep], scores[order][keep]


def generate_proposals(scores: np.ndarray, offsets: np.ndarray, anchors: np.ndarray, top_k: int,
                       nms_thr: float, pre_nms_top_n: int | None = None) -> list[Tube]:
    boxes, s = propose(scores, offsets, anchors, top_k, nms_thr, pre_nms_top_n)
    return [Tube(b, score=float(v)) for b, v in zip(boxes, s)]


def tpn_heads_forward(model: TrackNet, v) -> tuple[np.ndarray, np.ndarray]:
    """Objectness probabilities ``(h, w, A)`` and raw offset maps ``(h, w, 8A | 4TA)``."""
    cfg = model.cfg
    cls_map, reg_map = model.tpn(v)
    a = cfg.anchors_per_cell
    logits = cls_map.data.reshape(cfg.grid_h, cfg.grid_w, a, 2)
    probs = softmax(logits)[..., 1]
    return probs, reg_map.data[0]


def post_tpn_refine(model: TrackNet, v, proposals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class distributions ``(R, K+1)`` and refined tubes ``(R, T, 4)``."""
    cfg = model.cfg
    if len(proposals) == 0:
        return np.zeros((0, cfg.num_classes + 1)), np.zeros((0, cfg.gop_len, 4))
    regions = union_cells(proposals, cfg.grid_h, cfg.grid_w)
    logits, offsets = model.post_outputs(v, regions)
    return softmax(logits.data), decode_array(proposals, offsets.data.astype(np.float64))


def detect_gop(model: TrackNet, frames: np.ndarray, field: MotionField | None = None,
               clip: GoPClip | None = None) -> list[Detection]:
    """Full two-stage forward on one GoP.

    The motion field defaults to block matching on ``frames`` (or the clip's
    ground truth when the model is configured for it and ``clip`` is given).
    """
    cfg = model.cfg
    frames = np.asarray(frames)
    if frames.shape[0] != cfg.gop_len:
        raise ValueError(f"expected {cfg.gop_len} frames, got {frames.shape[0]}")
    if field is None:
        if clip is not None:
            field = motion_for_clip(cfg, clip)
        elif cfg.anchor_sets != "stationary":
            field = estimate_motion_block_matching(frames, (cfg.grid_w, cfg.grid_h),
                                                   cfg.search_radius, cfg.block_size)
    anchors = anchor_tubes(cfg, model.specs, field)
    v, _ = model.features(model.prepare_frames(frames))
    logits, offsets = model.tpn_outputs(v)
    scores = softmax(logits.data)[:, 1]
    props, _ = propose(scores, offsets.data.astype(np.float64), anchors, cfg.test_proposal_count,
                       cfg.nms_threshold, cfg.pre_nms_top_n)
    probs, refined = post_tpn_refine(model, v, props)
    return select_detections(probs, refined, cfg)


def select_detections(probs: np.ndarray, refined: np.ndarray, cfg: ModelConfig) -> list[Detection]:
    if len(probs) == 0:
        return []
    label = probs.argmax(axis=1)
    out: list[Tube] = []
    for c in range(1, probs.shape[1]):
        idx = np.nonzero(label == c)[0]
        if idx.size == 0:
            continue
        keep = nms_indices(refined[idx], probs[idx, c], cfg.final_nms_threshold)
        for i in idx[keep]:
            out.append(Tube(refined[i], score=float(probs[i, c]), class_id=c))
    out.sort(key=lambda t: -t.score)  # stable: per-class order kept on equal scores
    return [Detection.from_tube(t) for t in out[: cfg.test_proposal_count]]


def split_gops(clip: GoPClip, t_len: int) -> list[GoPClip]:
    """Consecutive non-overlapping ``t_len``-frame GoPs; a short tail is dropped."""
    return [clip.subclip(range(s, s + t_len)) for s in range(0, len(clip) - t_len + 1, t_len)]


def evaluate_clips(model: TrackNet, clips: Sequence[GoPClip]) -> DetectionReport:
    """Frame-level report of ``model`` over every GoP of ``clips``, in clip order."""
    cfg = model.cfg
    pairs = []
    for clip in clips:
        for gop in split_gops(clip, cfg.gop_len):
            pairs.append((gop.gt_tubes, detect_gop(model, gop.frames, clip=gop)))
    return evaluate(pairs, cfg.gop_len, (cfg.image_w, cfg.image_h))


# ---------------------------------------------------------------------------
# persistence

SPEC_RECORD = "anchors.specs"


def save_model(model: TrackNet, path: str | Path) -> None:
    arrays = dict(model.state_dict())
    arrays[SPEC_RECORD] = np.array([[s.w, s.h] for s in model.specs], dtype=np.float32)
    serialize.save(path, arrays)


def load_model(path: str | Path, cfg: ModelConfig) -> TrackNet:
    arrays = serialize.load(path)
    if SPEC_RECORD not in arrays:
        raise serialize.ModelFormatError(f"{path}: missing anchor shape record")
    specs = [AnchorSpec(float(w), float(h)) for w, h in arrays.pop(SPEC_RECORD)]
    model = TrackNet(cfg, specs, seed=0)
    model.load_state_dict(arrays)
    return model
