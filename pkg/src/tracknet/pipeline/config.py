"""Model configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

REGRESSION_MODES = ("interpolate", "predict_all")
ANCHOR_SETS = ("stationary", "tilted", "both")
MOTION_SOURCES = ("estimate", "gt")


@dataclass
class ModelConfig:
    gop_len: int = 8
    image_h: int = 128
    image_w: int = 128
    stride: int = 4
    stream_channels: int = 16
    squash_channels: int = 128
    num_anchor_shapes: int = 9
    anchor_sets: str = "both"
    tpn_mode: str = "interpolate"
    post_mode: str = "predict_all"
    stn_channels: int = 8
    fc_width: int = 256
    pool_bins: int = 7
    tpn_batch: int = 256
    tpn_max_positive: int = 128
    proposal_batch: int = 256
    proposal_max_positive: int = 128
    pre_nms_top_n: int = 2000
    train_proposal_count: int = 600
    test_proposal_count: int = 300
    nms_threshold: float = 0.7
    final_nms_threshold: float = 0.5
    tpn_pos_iou: float = 0.5
    tpn_neg_iou: tuple[float, float] = (0.05, 0.3)
    post_fg_iou: float = 0.5
    loss_weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 0.001)
    classes: list[str] = field(default_factory=lambda: ["background", "object"])
    init_std: float = 0.01
    motion_source: str = "estimate"
    search_radius: int = 4
    block_size: int = 8

    def __post_init__(self):
        self.tpn_neg_iou = tuple(self.tpn_neg_iou)
        self.loss_weights = tuple(self.loss_weights)
        self.classes = list(self.classes)
        self.validate()

    def validate(self):
        if self.gop_len < 2:
            raise ValueError("gop_len must be at least 2")
        if self.stride < 1 or self.image_h % self.stride or self.image_w % self.stride:
            raise ValueError(f"stride {self.stride} must divide the image size {self.image_h}x{self.image_w}")
        if self.stride != 4:
            raise ValueError("the backbone produces stride-4 feature maps; stride must be 4")
        if self.squash_channels < 1 or self.stream_channels < 1 or self.num_anchor_shapes < 1:
            raise ValueError("channel and anchor counts must be positive")
        if self.tpn_mode not in REGRESSION_MODES or self.post_mode not in REGRESSION_MODES:
            raise ValueError(f"regression modes must be one of {REGRESSION_MODES}")
        if self.anchor_sets not in ANCHOR_SETS:
            raise ValueError(f"anchor_sets must be one of {ANCHOR_SETS}")
        if self.motion_source not in MOTION_SOURCES:
            raise ValueError(f"motion_source must be one of {MOTION_SOURCES}")
        if len(self.classes) < 2 or self.classes[0] != "background":
            raise ValueError("classes must start with 'background' and name at least one object class")
        if len(self.loss_weights) != 5:
            raise ValueError("loss_weights needs five entries")
        if not 0 < self.nms_threshold < 1 or not 0 < self.final_nms_threshold < 1:
            raise ValueError("NMS thresholds must lie in (0, 1)")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.stride

    @property
    def grid_w(self) -> int:
        return self.image_w // self.stride

    @property
    def anchors_per_cell(self) -> int:
        """Anchor tubes per feature cell: M shapes times the number of anchor sets."""
        return self.num_anchor_shapes * (2 if self.anchor_sets == "both" else 1)

    @property
    def num_classes(self) -> int:
        """Object classes, excluding background."""
        return len(self.classes) - 1

    @staticmethod
    def offsets_per_tube(mode: str, t_len: int) -> int:
        return 8 if mode == "interpolate" else 4 * t_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tpn_neg_iou"] = list(self.tpn_neg_iou)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
