"""Shared helpers for the end-to-end learning benchmark.

Kept outside the test module so the same run can be reproduced from a
shell: ``python3 tests/acceptance_support.py interpolate``.
"""

from __future__ import annotations

import os
import sys
import time

import numpy as np

from tracknet.anchors import kmeans_anchor_shapes
from tracknet.data import generate_clip
from tracknet.pipeline import ModelConfig, TrainConfig, Trainer, build_network
from tracknet.pipeline.detect import evaluate_clips

N_TRAIN, N_HELD = 200, 50
ITERATIONS = int(os.environ.get("TRACKNET_BENCH_ITERS", "3000"))
LR_DROP_AT = int(os.environ.get("TRACKNET_BENCH_DROP", str(int(ITERATIONS * 0.8))))


def benchmark_clips():
    """Training clips are 16 frames so skip-frame GoP sampling has room; held-out clips are one GoP."""
    train = [generate_clip(1000 + s, t_len=16, n_objects=1 + s % 4) for s in range(N_TRAIN)]
    held = [generate_clip(5000 + s, t_len=8, n_objects=1 + s % 4) for s in range(N_HELD)]
    return train, held


def train_and_evaluate(mode: str, iterations: int = ITERATIONS, lr_drop_at: int = LR_DROP_AT,
                       log=None) -> dict:
    train, held = benchmark_clips()
    boxes = np.concatenate([np.stack([t.boxes for t in c.gt_tubes]).reshape(-1, 4) for c in train])
    cfg = ModelConfig(tpn_mode=mode, post_mode=mode)
    model = build_network(cfg, kmeans_anchor_shapes(boxes, cfg.num_anchor_shapes, seed=0), seed=0)
    trainer = Trainer(model, train, TrainConfig(iterations=iterations, lr_drop_at=lr_drop_at))
    t0 = time.perf_counter()

    def progress(it, lr, loss):
        if log is not None and it % 100 == 0:
            print(f"[{mode}] iter {it} {time.perf_counter() - t0:.0f}s total {loss.total:.3f}", file=log,
                  flush=True)

    trainer.run(callback=progress)
    train_seconds = time.perf_counter() - t0
    held_rep = evaluate_clips(model, held)
    train_rep = evaluate_clips(model, train)
    return {"mode": mode, "iterations": iterations, "train_seconds": train_seconds,
            "total_seconds": time.perf_counter() - t0,
            "held_ap50": held_rep.ap_at["0.50"], "train_ap50": train_rep.ap_at["0.50"]}


if __name__ == "__main__":
    for m in sys.argv[1:] or ["interpolate", "predict_all"]:
        print(train_and_evaluate(m, log=sys.stderr), flush=True)
