"""SGD / AdamW updates and warmup-decay learning-rate schedules over dicts of numpy arrays."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

SCHEDULES = ("constant", "linear-warmup-linear-decay", "cosine-warmup-cosine-decay")


def learning_rate(t: int, total: int, base_lr: float, schedule: str = "constant",
                  warmup_fraction: float = 0.0) -> float:
    """Learning rate for the ``t``-th update, ``1 <= t <= total``.

    Warmup covers the first ``round(warmup_fraction * total)`` updates and reaches
    ``base_lr`` exactly at its last step; decay then reaches 0 at ``t == total``.
    """
    if schedule == "constant":
        return base_lr
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    warm = int(math.floor(warmup_fraction * total + 0.5))
    cosine = schedule.startswith("cosine")
    if t <= warm:
        frac = t / warm
        return base_lr * (0.5 * (1.0 - math.cos(math.pi * frac)) if cosine else frac)
    span = total - warm
    if span <= 0:
        return base_lr
    frac = (t - warm) / span
    return base_lr * (0.5 * (1.0 + math.cos(math.pi * frac)) if cosine else 1.0 - frac)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict:
    return {k: (p - lr * grads[k]) if k in grads else p for k, p in params.items()}


def init_moments(params: Mapping[str, np.ndarray]) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], moments: Mapping,
               t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update; returns ``(params, moments)`` as new dicts.

    Parameters absent from ``grads`` are frozen: neither moved nor decayed.
    """
    if t < 1:
        raise ValueError("AdamW step counter starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        m, v = moments["m"][k], moments["v"][k]
        if k not in grads:
            new_p[k], new_m[k], new_v[k] = p, m, v
            continue
        g = grads[k]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = p * (1.0 - lr * weight_decay) - lr * step
        new_m[k], new_v[k] = m, v
    return new_p, {"m": new_m, "v": new_v}
