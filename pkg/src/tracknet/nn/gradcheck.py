"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, kink_recording


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    restepped: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-3,
                   max_checks: int = 10_000, seed: int = 0, dtype=np.float64,
                   min_eps: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Parameters are cast to ``dtype`` for the duration of the check and
    restored afterwards; ``loss_fn`` must build its graph from their current
    data.  Above ``max_checks`` entries in total, each parameter contributes a
    seeded random subsample.  When the stencil ``x +- eps`` switches a
    non-smooth op's branch (ReLU mask, pooling argmax, ...), the step is
    divided by 10 until both sides agree with the centre, down to ``min_eps``.
    """
    originals = {k: p.data for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        with kink_recording() as base_kinks:
            loss = loss_fn()
        base = list(base_kinks)
        backward(loss)
        analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

        total = sum(p.data.size for p in params.values())
        rng = np.random.default_rng(seed)
        per = max(1, max_checks // max(len(params), 1))
        report = GradCheckReport()

        def evaluate() -> tuple[float, list]:
            with kink_recording() as kinks:
                value = loss_fn().item()
            return value, list(kinks)

        for name, p in params.items():
            flat = p.data.reshape(-1)
            if total <= max_checks or flat.size <= per:
                idx = np.arange(flat.size)
            else:
                idx = np.sort(rng.choice(flat.size, size=per, replace=False))
            worst = 0.0
            for i in idx:
                orig = flat[i]
                h = eps
                while True:
                    flat[i] = orig + h
                    lp, kp = evaluate()
                    flat[i] = orig - h
                    lm, km = evaluate()
                    flat[i] = orig
                    if (kp == base and km == base) or h / 10 < min_eps:
                        break
                    h /= 10
                    report.restepped += 1
                numeric = (lp - lm) / (2 * h)
                worst = max(worst, rel_error(float(analytic[name].reshape(-1)[i]), numeric))
                report.checked += 1
            report.per_param[name] = worst
        return report
    finally:
        for k, p in params.items():
            p.data = originals[k]
            p.grad = None
