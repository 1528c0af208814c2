"""The two-stream backbone, spatial transformer and both detection heads."""

from __future__ import annotations

import numpy as np

from ..anchors import AnchorSpec
from ..encoding import interpolation_kernel
from ..nn import ops
from ..nn.layers import Conv2d, Conv3d, Linear, Module
from ..nn.tensor import DEFAULT_DTYPE, Tensor
from .config import ModelConfig

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=DEFAULT_DTYPE)


class Stream2D(Module):
    """Per-frame appearance features: two conv + 2x2 max-pool stages, then frames stacked on channels."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c = cfg.stream_channels
        self.conv1 = self.add_module("conv1", Conv2d(3, c, 3, rng, cfg.init_std))
        self.conv2 = self.add_module("conv2", Conv2d(c, c, 3, rng, cfg.init_std))
        self.squash = self.add_module("squash", Conv2d(c * cfg.gop_len, cfg.squash_channels, 1, rng, cfg.init_std))

    def __call__(self, frames: Tensor) -> Tensor:
        t, h, w, _ = frames.shape
        x = ops.max_pool2d(ops.relu(self.conv1(frames)), 2)
        x = ops.max_pool2d(ops.relu(self.conv2(x)), 2)
        # (T, h, w, C) -> (1, h, w, T*C), frame-major channel blocks
        x = ops.transpose(x, (1, 2, 0, 3))
        x = ops.reshape(x, (1, h // 4, w // 4, -1))
        return ops.relu(self.squash(x))


class Stream3D(Module):
    """Spatiotemporal features: 3D conv, then a max-pool collapsing time and striding space by 4."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c = cfg.stream_channels
        self.conv1 = self.add_module("conv1", Conv3d(3, c, 3, rng, cfg.init_std))
        self.squash = self.add_module("squash", Conv2d(c, cfg.squash_channels, 1, rng, cfg.init_std))

    def __call__(self, frames: Tensor) -> Tensor:
        t, h, w, _ = frames.shape
        x = ops.reshape(frames, (1, t, h, w, 3))
        x = ops.relu(self.conv1(x))
        x = ops.max_pool3d(x, (t, 4, 4))
        x = ops.reshape(x, (1, h // 4, w // 4, -1))
        return ops.relu(self.squash(x))


class SpatialTransformer(Module):
    """One conv and one fully connected layer predicting six affine parameters.

    The final layer starts at zero weights with an identity bias.
    """

    def __init__(self, cfg: ModelConfig, channels: int, rng):
        super().__init__()
        self.conv = self.add_module("conv", Conv2d(channels, cfg.stn_channels, 3, rng, cfg.init_std))
        self.fc = self.add_module("fc", Linear(cfg.grid_h * cfg.grid_w * cfg.stn_channels, 6, None))
        self.fc.bias.data = IDENTITY_THETA.copy()

    def __call__(self, u: Tensor) -> tuple[Tensor, Tensor]:
        h = ops.relu(self.conv(u))
        theta = self.fc(ops.reshape(h, (1, -1)))
        return ops.affine_sample(u, theta), theta


class TPNHeads(Module):
    def __init__(self, cfg: ModelConfig, channels: int, rng):
        super().__init__()
        a = cfg.anchors_per_cell
        self.cls = self.add_module("cls", Conv2d(channels, 2 * a, 3, rng, cfg.init_std))
        self.reg = self.add_module("reg", Conv2d(channels, a * cfg.offsets_per_tube(cfg.tpn_mode, cfg.gop_len),
                                                 3, rng, cfg.init_std))

    def __call__(self, v: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(v), self.reg(v)


class PostTPNHeads(Module):
    def __init__(self, cfg: ModelConfig, channels: int, rng):
        super().__init__()
        din = cfg.pool_bins * cfg.pool_bins * channels
        self.fc1 = self.add_module("fc1", Linear(din, cfg.fc_width, rng, cfg.init_std))
        self.fc2 = self.add_module("fc2", Linear(cfg.fc_width, cfg.fc_width, rng, cfg.init_std))
        self.cls = self.add_module("cls", Linear(cfg.fc_width, cfg.num_classes + 1, rng, cfg.init_std))
        self.reg = self.add_module("reg", Linear(cfg.fc_width, cfg.offsets_per_tube(cfg.post_mode, cfg.gop_len),
                                                 rng, cfg.init_std))

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        x = ops.reshape(pooled, (pooled.shape[0], -1))
        x = ops.relu(self.fc1(x))
        x = ops.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


def expand_offsets(raw: Tensor, mode: str, t_len: int) -> Tensor:
    """``(N, 8)`` endpoint or ``(N, 4T)`` per-frame predictions -> ``(N, T, 4)`` offsets."""
    n = raw.shape[0]
    if mode == "predict_all":
        return ops.reshape(raw, (n, t_len, 4))
    endpoints = ops.reshape(raw, (n, 2, 4))
    return ops.matmul_const(endpoints, interpolation_kernel(t_len))


class TrackNet(Module):
    def __init__(self, cfg: ModelConfig, specs: list[AnchorSpec], seed: int = 0):
        super().__init__()
        if len(specs) != cfg.num_anchor_shapes:
            raise ValueError(f"expected {cfg.num_anchor_shapes} anchor shapes, got {len(specs)}")
        self.cfg = cfg
        # stored as float32 in model files; round now so reloads are exact
        self.specs = [AnchorSpec(float(np.float32(s.w)), float(np.float32(s.h))) for s in specs]
        rng = np.random.default_rng(seed)
        d2 = 2 * cfg.squash_channels
        self.stream2d = self.add_module("stream2d", Stream2D(cfg, rng))
        self.stream3d = self.add_module("stream3d", Stream3D(cfg, rng))
        self.stn = self.add_module("stn", SpatialTransformer(cfg, d2, rng))
        self.tpn = self.add_module("tpn", TPNHeads(cfg, d2, rng))
        self.post = self.add_module("post", PostTPNHeads(cfg, d2, rng))

    @property
    def dtype(self):
        return self.stream2d.conv1.weight.dtype

    def prepare_frames(self, frames: np.ndarray) -> Tensor:
        frames = np.asarray(frames)
        cfg = self.cfg
        if frames.shape != (cfg.gop_len, cfg.image_h, cfg.image_w, 3):
            raise ValueError(f"expected frames of shape {(cfg.gop_len, cfg.image_h, cfg.image_w, 3)}, "
                             f"got {frames.shape}")
        return Tensor((frames.astype(np.float64) / 255.0 - 0.5).astype(self.dtype))

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Transformed shared features ``V (1, h, w, 2D)`` and the affine parameters."""
        u = ops.concat([self.stream2d(x), self.stream3d(x)], axis=-1)
        return self.stn(u)

    def tpn_outputs(self, v: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits ``(N, 2)`` and offsets ``(N, T, 4)`` over every anchor, row-major by cell."""
        cfg = self.cfg
        cls_map, reg_map = self.tpn(v)
        a = cfg.anchors_per_cell
        n = cfg.grid_h * cfg.grid_w * a
        logits = ops.reshape(cls_map, (n, 2))
        raw = ops.reshape(reg_map, (n, -1))
        return logits, expand_offsets(raw, cfg.tpn_mode, cfg.gop_len)

    def post_outputs(self, v: Tensor, regions: np.ndarray) -> tuple[Tensor, Tensor]:
        """Class logits ``(R, K+1)`` and offsets ``(R, T, 4)`` for pooled regions."""
        cfg = self.cfg
        fmap = ops.reshape(v, v.shape[1:])
        pooled = ops.roi_pool(fmap, regions, cfg.pool_bins)
        logits, raw = self.post(pooled)
        return logits, expand_offsets(raw, cfg.post_mode, cfg.gop_len)


def build_network(cfg: ModelConfig, specs: list[AnchorSpec] | None = None, seed: int = 0) -> TrackNet:
    if specs is None:
        # placeholder shapes; real runs pass K-means centroids
        side = np.linspace(0.08, 0.3, cfg.num_anchor_shapes)
        specs = [AnchorSpec(float(s), float(s) * (0.8 + 0.4 * (i % 2))) for i, s in enumerate(side)]
    return TrackNet(cfg, specs, seed)
