"""Training: target assignment, batch sampling, the multi-task loss graph and the update loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from ..anchors import MotionField
from ..data import GoPClip, draw_gop
from ..encoding import AnchorLabel, LossBreakdown, encode_array, label_anchor_array
from ..nn import ops
from ..nn.optim import AdamState, adam_step
from ..nn.tensor import Graph, NonFiniteError, Tensor
from ..geometry import tube_iou_matrix, union_cells
from .detect import anchor_tubes, motion_for_clip, propose, softmax
from .network import TrackNet

TERMS = ("cls", "reg", "cls_tpn", "reg_tpn", "smooth")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-3
    lr_drop_at: int = 1500
    lr_drop_factor: float = 0.1
    seed: int = 0
    skip_range: tuple[int, int] = (0, 5)
    flip: bool = True
    clips_per_step: int = 1

    def __post_init__(self):
        self.skip_range = tuple(int(s) for s in self.skip_range)
        if self.iterations < 0 or self.clips_per_step < 1:
            raise ValueError("iterations must be >= 0 and clips_per_step >= 1")
        if self.lr <= 0 or not 0 < self.lr_drop_factor <= 1:
            raise ValueError("lr must be positive and lr_drop_factor in (0, 1]")
        lo, hi = self.skip_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid skip range {self.skip_range}")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the zero-based ``iteration``."""
        return self.lr * (self.lr_drop_factor if iteration >= self.lr_drop_at else 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_range"] = list(self.skip_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageTargets:
    """Everything the loss needs that is fixed once the batch is sampled.

    ``anchor_idx`` / ``anchor_obj`` are the sampled TPN anchors and their
    objectness labels (1 object, 0 background); the first ``n_anchor_pos``
    entries are the positives, whose regression targets are ``tpn_targets``.
    Proposals follow the same layout with class labels.
    """

    anchor_idx: np.ndarray
    anchor_obj: np.ndarray
    n_anchor_pos: int
    tpn_targets: np.ndarray
    prop_regions: np.ndarray
    prop_cls: np.ndarray
    n_prop_pos: int
    post_targets: np.ndarray


def gt_array(clip: GoPClip, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    t_len = len(clip)
    if not clip.gt_tubes:
        return np.zeros((0, t_len, 4)), np.zeros(0, dtype=np.int64)
    boxes = np.stack([t.boxes for t in clip.gt_tubes])
    cls = np.array([1 if t.class_id is None else int(t.class_id) for t in clip.gt_tubes], dtype=np.int64)
    if np.any(cls < 1) or np.any(cls > num_classes):
        raise ValueError(f"gt class ids {sorted(set(cls.tolist()))} outside 1..{num_classes}")
    return boxes, cls


def _take(rng: np.random.Generator, idx: np.ndarray, k: int) -> np.ndarray:
    if len(idx) <= k:
        return idx
    return np.sort(rng.choice(idx, size=k, replace=False))


def sample_anchors(labels: np.ndarray, batch: int, max_pos: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Up to ``max_pos`` positives, padded with negatives to ``batch``; ignored anchors never taken."""
    pos = _take(rng, np.nonzero(labels == AnchorLabel.POSITIVE)[0], max_pos)
    neg = _take(rng, np.nonzero(labels == AnchorLabel.NEGATIVE)[0], batch - len(pos))
    return np.concatenate([pos, neg]), len(pos)


def assign_targets(model: TrackNet, anchors: np.ndarray, gts: np.ndarray, gt_cls: np.ndarray,
                   tpn_scores: np.ndarray, tpn_offsets: np.ndarray,
                   rng: np.random.Generator) -> StageTargets:
    """Label and sample both stages for one GoP.

    Proposals are decoded from the current TPN outputs (no gradient flows
    through their coordinates) and the ground-truth tubes are appended, so
    the refinement stage always sees positives.
    """
    cfg = model.cfg
    t_len = cfg.gop_len
    lo, hi = cfg.tpn_neg_iou
    labels, matched = label_anchor_array(anchors, gts, cfg.tpn_pos_iou, lo, hi)
    a_idx, a_pos = sample_anchors(labels, cfg.tpn_batch, cfg.tpn_max_positive, rng)
    a_obj = (np.arange(len(a_idx)) < a_pos).astype(np.int64)
    pos_idx = a_idx[:a_pos]
    tpn_t = encode_array(anchors[pos_idx], gts[matched[pos_idx]]) if a_pos else np.zeros((0, t_len, 4))

    props, _ = propose(tpn_scores, tpn_offsets, anchors, cfg.train_proposal_count,
                       cfg.nms_threshold, cfg.pre_nms_top_n)
    props = np.concatenate([props, gts], axis=0)
    if len(gts):
        iou = tube_iou_matrix(props, gts)
        best = iou.argmax(axis=1)
        fg = iou[np.arange(len(props)), best] >= cfg.post_fg_iou
    else:
        best = np.zeros(len(props), dtype=np.int64)
        fg = np.zeros(len(props), dtype=bool)
    p_pos = _take(rng, np.nonzero(fg)[0], cfg.proposal_max_positive)
    p_neg = _take(rng, np.nonzero(~fg)[0], cfg.proposal_batch - len(p_pos))
    p_idx = np.concatenate([p_pos, p_neg])
    p_cls = np.zeros(len(p_idx), dtype=np.int64)
    p_cls[: len(p_pos)] = gt_cls[best[p_pos]] if len(p_pos) else p_cls[:0]
    post_t = encode_array(props[p_pos], gts[best[p_pos]]) if len(p_pos) else np.zeros((0, t_len, 4))
    return StageTargets(a_idx, a_obj, a_pos, tpn_t, union_cells(props[p_idx], cfg.grid_h, cfg.grid_w),
                        p_cls, len(p_pos), post_t)


def loss_terms(model: TrackNet, v: Tensor, tpn_logits: Tensor, tpn_offsets: Tensor,
               targets: StageTargets) -> dict[str, Tensor]:
    """The five loss terms as graph nodes, in the order of :data:`TERMS`."""
    cfg = model.cfg
    zero = Tensor(np.zeros((), dtype=v.dtype))
    cls_tpn = ops.softmax_cross_entropy(ops.gather_rows(tpn_logits, targets.anchor_idx), targets.anchor_obj)
    smooth = []
    if targets.n_anchor_pos:
        pos_off = ops.gather_rows(tpn_offsets, targets.anchor_idx[: targets.n_anchor_pos])
        reg_tpn = ops.smooth_l1_loss(pos_off, targets.tpn_targets, normalizer=targets.n_anchor_pos)
        if cfg.tpn_mode == "predict_all":
            smooth.append(ops.tv_penalty(pos_off))
    else:
        reg_tpn = zero

    logits, offsets = model.post_outputs(v, targets.prop_regions)
    cls = ops.softmax_cross_entropy(logits, targets.prop_cls)
    if targets.n_prop_pos:
        pos_off = ops.gather_rows(offsets, np.arange(targets.n_prop_pos))
        reg = ops.smooth_l1_loss(pos_off, targets.post_targets, normalizer=targets.n_prop_pos)
        if cfg.post_mode == "predict_all":
            smooth.append(ops.tv_penalty(pos_off))
    else:
        reg = zero
    return {"cls": cls, "reg": reg, "cls_tpn": cls_tpn, "reg_tpn": reg_tpn,
            "smooth": ops.add(*smooth) if smooth else zero}


def weighted_total(terms: dict[str, Tensor], weights: Sequence[float]) -> Tensor:
    return ops.add(*[ops.scale(terms[k], float(w)) for k, w in zip(TERMS, weights)])


def _check_terms(values: dict[str, float]) -> None:
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if bad:
        detail = ", ".join(f"{k}={values[k]}" for k in bad)
        raise NonFiniteError(f"non-finite loss term(s): {detail}")


def gop_loss(model: TrackNet, clip: GoPClip, field: MotionField | None,
             rng: np.random.Generator) -> tuple[Tensor, dict[str, float], Callable[[], Tensor]]:
    """Forward one GoP, sample targets, and build the weighted loss.

    Also returns a closure recomputing the loss with the sampled targets
    held fixed, for finite-difference checking.
    """
    cfg = model.cfg
    if field is None:
        field = motion_for_clip(cfg, clip)
    anchors = anchor_tubes(cfg, model.specs, field)
    gts, gt_cls = gt_array(clip, cfg.num_classes)
    x = model.prepare_frames(clip.frames)

    v, _ = model.features(x)
    logits, offsets = model.tpn_outputs(v)
    scores = softmax(logits.data)[:, 1]
    targets = assign_targets(model, anchors, gts, gt_cls, scores, offsets.data.astype(np.float64), rng)
    terms = loss_terms(model, v, logits, offsets, targets)
    values = {k: float(t.data) for k, t in terms.items()}
    _check_terms(values)

    def replay() -> Tensor:
        v2, _ = model.features(x)
        lg, off = model.tpn_outputs(v2)
        return weighted_total(loss_terms(model, v2, lg, off, targets), cfg.loss_weights)

    return weighted_total(terms, cfg.loss_weights), values, replay


def train_step(model: TrackNet, batch: Sequence[GoPClip | tuple[GoPClip, MotionField]],
               state: AdamState, rng: np.random.Generator, lr: float,
               lr_mult: dict[str, float] | None = None) -> LossBreakdown:
    """One Adam update on the mean loss over ``batch``.

    Items are clips or ``(clip, motion field)`` pairs; a missing field is
    computed from the clip as configured.
    """
    if not batch:
        raise ValueError("train_step needs at least one clip")
    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    sums = dict.fromkeys(TERMS, 0.0)
    w = model.cfg.loss_weights
    for item in batch:
        clip, field = item if isinstance(item, tuple) else (item, None)
        loss, values, _ = gop_loss(model, clip, field, rng)
        if len(batch) > 1:
            loss = ops.scale(loss, 1.0 / len(batch))
        Graph(loss).backward()
        for k in TERMS:
            sums[k] += values[k] / len(batch)
    grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
    adam_step({k: p.data for k, p in params.items()}, grads, state, lr, lr_mult=lr_mult)
    return LossBreakdown(sums["cls"], sums["reg"], sums["cls_tpn"], sums["reg_tpn"], sums["smooth"],
                         sum(wi * sums[k] for wi, k in zip(w, TERMS)))


class Trainer:
    """Samples skip-frame GoPs (optionally flipped) from a clip pool and steps the model.

    Motion fields are cached per (clip, frame indices) so repeated samples
    do not re-run block matching; a flipped sample uses the mirrored field.
    """

    def __init__(self, model: TrackNet, clips: Sequence[GoPClip], cfg: TrainConfig):
        if not clips:
            raise ValueError("training needs at least one clip")
        for i, c in enumerate(clips):
            if c.frames.shape[1:3] != (model.cfg.image_h, model.cfg.image_w):
                raise ValueError(f"clip {i} is {c.width}x{c.height}, model expects "
                                 f"{model.cfg.image_w}x{model.cfg.image_h}")
            if len(c) < model.cfg.gop_len:
                raise ValueError(f"clip {i} has {len(c)} frames, fewer than the GoP length")
        self.model = model
        self.clips = list(clips)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.state = AdamState()
        self.iteration = 0
        self._motion: dict[tuple, MotionField] = {}

    def sample(self) -> tuple[GoPClip, MotionField]:
        ci = int(self.rng.integers(len(self.clips)))
        clip = self.clips[ci]
        idx = draw_gop(self.rng, self.model.cfg.gop_len, len(clip), self.cfg.skip_range)
        flip = bool(self.cfg.flip and self.rng.random() < 0.5)
        gop = clip.subclip(idx)
        key = (ci, tuple(idx))
        if key not in self._motion:
            self._motion[key] = motion_for_clip(self.model.cfg, gop)
        field = self._motion[key]
        # flipping mirrors the field exactly instead of re-estimating it
        return (gop.flipped(), field.flipped()) if flip else (gop, field)

    def step(self) -> LossBreakdown:
        batch = [self.sample() for _ in range(self.cfg.clips_per_step)]
        out = train_step(self.model, batch, self.state, self.rng, self.cfg.lr_at(self.iteration))
        self.iteration += 1
        return out

    def run(self, iterations: int | None = None,
            callback: Callable[[int, float, LossBreakdown], None] | None = None) -> list[LossBreakdown]:
        n = self.cfg.iterations if iterations is None else iterations
        history = []
        for _ in range(n):
            it, lr = self.iteration, self.cfg.lr_at(self.iteration)
            out = self.step()
            history.append(out)
            if callback is not None:
                callback(it, lr, out)
        return history
