"""Gradient verification suite: every node kind, then the full two-stage model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import ops
from .nn.gradcheck import GradCheckReport, gradient_check
from .nn.tensor import parameter

TOLERANCE = 1e-3


def _p(rng, shape, name, scale=1.0):
    return parameter(rng.normal(0.0, scale, size=shape), name)


def _case_relu(rng):
    x = _p(rng, (6, 7), "x")
    w = rng.normal(size=(6, 7))
    return (lambda: ops.weighted_sum(ops.relu(x), w)), {"x": x}


def _case_add(rng):
    a, b = _p(rng, (4, 5), "a"), _p(rng, (4, 5), "b")
    w = rng.normal(size=(4, 5))
    return (lambda: ops.weighted_sum(ops.add(a, b, a), w)), {"a": a, "b": b}


def _case_scale(rng):
    x = _p(rng, (3, 4), "x")
    w = rng.normal(size=(3, 4))
    return (lambda: ops.weighted_sum(ops.scale(x, -2.5), w)), {"x": x}


def _case_reshape_transpose(rng):
    x = _p(rng, (2, 3, 4), "x")
    w = rng.normal(size=(4, 6))
    return (lambda: ops.weighted_sum(ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6)), w)), {"x": x}


def _case_concat(rng):
    a, b = _p(rng, (3, 2), "a"), _p(rng, (3, 5), "b")
    w = rng.normal(size=(3, 7))
    return (lambda: ops.weighted_sum(ops.concat([a, b], axis=1), w)), {"a": a, "b": b}


def _case_gather(rng):
    x = _p(rng, (6, 3), "x")
    idx = np.array([4, 0, 4, 2])
    w = rng.normal(size=(4, 3))
    return (lambda: ops.weighted_sum(ops.gather_rows(x, idx), w)), {"x": x}


def _case_linear(rng):
    x, wt, b = _p(rng, (5, 4), "x"), _p(rng, (4, 3), "w"), _p(rng, (3,), "b")
    w = rng.normal(size=(5, 3))
    return (lambda: ops.weighted_sum(ops.linear(x, wt, b), w)), {"x": x, "w": wt, "b": b}


def _case_interpolate(rng):
    from .encoding import interpolation_kernel

    x = _p(rng, (3, 2, 4), "x")
    k = interpolation_kernel(5)
    w = rng.normal(size=(3, 5, 4))
    return (lambda: ops.weighted_sum(ops.matmul_const(x, k), w)), {"x": x}


def _case_conv2d(rng):
    x, wt, b = _p(rng, (2, 6, 5, 3), "x"), _p(rng, (3, 3, 3, 4), "w"), _p(rng, (4,), "b")
    w1 = rng.normal(size=(2, 6, 5, 4))
    w2 = rng.normal(size=(2, 2, 2, 4))

    def f():
        y1 = ops.conv2d(x, wt, b, stride=1, pad=1)
        y2 = ops.conv2d(x, wt, b, stride=2, pad=0)
        return ops.add(ops.weighted_sum(y1, w1), ops.weighted_sum(y2, w2))

    return f, {"x": x, "w": wt, "b": b}


def _case_conv3d(rng):
    x, wt, b = _p(rng, (1, 4, 5, 5, 2), "x"), _p(rng, (3, 3, 3, 2, 3), "w"), _p(rng, (3,), "b")
    w = rng.normal(size=(1, 4, 5, 5, 3))
    return (lambda: ops.weighted_sum(ops.conv3d(x, wt, b, pad=1), w)), {"x": x, "w": wt, "b": b}


def _case_maxpool2d(rng):
    x = _p(rng, (2, 6, 4, 3), "x")
    w = rng.normal(size=(2, 3, 2, 3))
    return (lambda: ops.weighted_sum(ops.max_pool2d(x, 2), w)), {"x": x}


def _case_maxpool3d(rng):
    x = _p(rng, (1, 4, 8, 8, 2), "x")
    w = rng.normal(size=(1, 1, 2, 2, 2))
    return (lambda: ops.weighted_sum(ops.max_pool3d(x, (4, 4, 4)), w)), {"x": x}


def _case_roi_pool(rng):
    x = _p(rng, (8, 9, 3), "x")
    regions = np.array([[0, 8, 0, 9], [2, 5, 1, 7], [3, 4, 6, 7]])
    w = rng.normal(size=(3, 3, 3, 3))
    return (lambda: ops.weighted_sum(ops.roi_pool(x, regions, 3), w)), {"x": x}


def _case_affine(rng):
    x = _p(rng, (2, 5, 6, 3), "x")
    base = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    theta = parameter(base + rng.normal(0, 0.15, size=(2, 6)), "theta")
    w = rng.normal(size=(2, 5, 6, 3))
    return (lambda: ops.weighted_sum(ops.affine_sample(x, theta), w)), {"x": x, "theta": theta}


def _case_softmax_xent(rng):
    z = _p(rng, (6, 4), "z", 2.0)
    labels = rng.integers(0, 4, size=6)
    return (lambda: ops.softmax_cross_entropy(z, labels)), {"z": z}


def _case_smooth_l1(rng):
    x = _p(rng, (5, 3, 4), "x", 1.5)
    target = rng.normal(size=(5, 3, 4))
    return (lambda: ops.smooth_l1_loss(x, target, normalizer=5.0)), {"x": x}


def _case_tv(rng):
    x = _p(rng, (3, 6, 4), "x")
    return (lambda: ops.tv_penalty(x)), {"x": x}


NODE_CASES: dict[str, Callable] = {
    "relu": _case_relu,
    "add": _case_add,
    "scale": _case_scale,
    "reshape+transpose": _case_reshape_transpose,
    "concat": _case_concat,
    "gather_rows": _case_gather,
    "linear": _case_linear,
    "interpolate": _case_interpolate,
    "conv2d": _case_conv2d,
    "conv3d": _case_conv3d,
    "max_pool2d": _case_maxpool2d,
    "max_pool3d": _case_maxpool3d,
    "roi_pool": _case_roi_pool,
    "affine_sample": _case_affine,
    "softmax_xent": _case_softmax_xent,
    "smooth_l1": _case_smooth_l1,
    "tv_smooth": _case_tv,
}


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(TOLERANCE)


def check_node(kind: str, seed: int = 0) -> GradCheckReport:
    loss_fn, params = NODE_CASES[kind](np.random.default_rng(seed))
    return gradient_check(loss_fn, params, eps=1e-3, seed=seed)


def desk_check_model(seed: int = 0):
    """Small-width model at full desk resolution: 32x32 features, T=4, M=2.

    Biases (including the transformer's identity bias) get a small seeded
    jitter.  At the exact initial values many ReLU inputs are exactly zero
    and identity sampling lands on pixel centres, both points where the
    loss has a corner and finite differences are ill-defined.
    """
    from .anchors import AnchorSpec
    from .pipeline.config import ModelConfig
    from .pipeline.network import TrackNet

    cfg = ModelConfig(gop_len=4, num_anchor_shapes=2, stream_channels=4, squash_channels=8,
                      stn_channels=4, fc_width=16, pool_bins=7, tpn_batch=32, tpn_max_positive=16,
                      proposal_batch=16, proposal_max_positive=8, train_proposal_count=30,
                      motion_source="gt", init_std=0.1)
    specs = [AnchorSpec(0.15, 0.15), AnchorSpec(0.2, 0.12)]
    model = TrackNet(cfg, specs, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    for name, p in model.named_parameters().items():
        if name.endswith("bias"):
            p.data = (p.data + rng.normal(0.0, 0.01, size=p.shape)).astype(p.dtype)
    return model


def check_full_model(seed: int = 0, max_checks: int = 260) -> GradCheckReport:
    """Finite-difference check of the total two-stage loss on one synthetic GoP.

    Sampled anchors and proposals are fixed after the first forward pass so
    the loss is a function of the parameters alone.
    """
    from .data import generate_clip
    from .pipeline.train import gop_loss

    model = desk_check_model(seed)
    model.astype(np.float64)
    clip = generate_clip(seed, t_len=4, n_objects=2)
    _, _, replay = gop_loss(model, clip, None, np.random.default_rng(seed))
    return gradient_check(replay, model.named_parameters(), eps=1e-3, max_checks=max_checks, seed=seed)


def run_suite(seed: int = 0, full_model: bool = True) -> list[SuiteResult]:
    results = []
    for kind in NODE_CASES:
        t0 = time.perf_counter()
        rep = check_node(kind, seed)
        results.append(SuiteResult(kind, rep, time.perf_counter() - t0))
    if full_model:
        t0 = time.perf_counter()
        rep = check_full_model(seed)
        results.append(SuiteResult("full_model", rep, time.perf_counter() - t0))
    return results
