"""Network assembly, detection and training."""

from .config import ModelConfig
from .detect import (Detection, anchor_tubes, detect_gop, generate_proposals, load_model,
                     post_tpn_refine, save_model, tpn_heads_forward)
from .network import TrackNet, build_network
from .train import TrainConfig, Trainer, train_step

__all__ = [
    "ModelConfig", "Detection", "TrackNet", "TrainConfig", "Trainer", "anchor_tubes", "build_network",
    "detect_gop", "generate_proposals", "load_model", "post_tpn_refine", "save_model",
    "tpn_heads_forward", "train_step",
]
