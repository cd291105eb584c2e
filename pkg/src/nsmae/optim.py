"""AdamW with decoupled weight decay and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, **hyper)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float) -> tuple[dict[str, np.ndarray], OptimState]:
    """One decoupled AdamW update; returns new parameter dict and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p[name] = theta - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta)
        new_m[name], new_v[name] = m, v
    return new_p, OptimState(new_m, new_v, t, b1, b2, state.eps, state.weight_decay)


def one_cycle_lr(step: int, total_steps: int, lr_max: float, warmup: float = 0.3,
                 div_start: float = 25.0, div_final: float = 1e4) -> float:
    """Linear warmup from lr_max/25 to lr_max, then cosine decay to lr_max/1e4."""
    if total_steps <= 0:
        raise ValueError("one-cycle schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr0 = lr_max / div_start
    lr_end = lr_max / div_final
    peak = warmup * total_steps
    if step <= peak:
        return lr_max if peak == 0 else lr0 + (lr_max - lr0) * step / peak
    frac = (step - peak) / (total_steps - peak)
    return lr_end + (lr_max - lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))
