"""AdamW with decoupled weight decay, plus the cosine learning-rate curve.

The decay is applied straight to the parameters before the moment-based
update, never through the gradients: with zero gradients each step
shrinks a parameter by exactly (1 - lr * wd). Moments and updates run
in the parameter dtype, in place, so the optimizer adds no parameter
copies and training stays bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_EPS = 1e-8


@dataclass
class AdamWState:
    """First/second moments per parameter name and the shared step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = DEFAULT_BETAS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    eps: float = DEFAULT_EPS,
) -> None:
    """One optimizer step, mutating params and state in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if name not in grads:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(iteration: int, total: int, lr0: float, lr1: float) -> float:
    """Cosine anneal from lr0 at iteration 0 to lr1 at iteration == total."""
    if total < 1:
        raise ConfigError(f"total iterations must be >= 1, got {total}")
    if not 0 <= iteration <= total:
        raise ConfigError(f"iteration {iteration} outside [0, {total}]")
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * iteration / total))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm. Off by default in training; the knob
    exists for experiments that need it.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm
