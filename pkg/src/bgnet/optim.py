"""Adamax and the warm-up / plateau / step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


class NumericError(FloatingPointError):
    """A non-finite value reached the optimizer."""


@dataclass
class Schedule:
    """Defaults reproduce the full-scale recipe: 1e-3 steps up to 4e-3, flat to
    epoch 10, then x0.25 every two epochs down to 2.5e-4."""

    base_lr: float = 0.001
    warm_increment: float = 0.001
    warm_target: float = 0.004
    plateau_end_epoch: int = 10
    decay_factor: float = 0.25
    decay_every: int = 2
    floor_lr: float = 0.00025

    def __post_init__(self):
        if self.floor_lr > self.warm_target:
            raise ValueError("floor_lr must not exceed warm_target")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")


def lr_at_epoch(epoch: int, s: Schedule) -> float:
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    if epoch <= s.plateau_end_epoch:
        return min(s.base_lr + (epoch - 1) * s.warm_increment, s.warm_target)
    decays = (epoch - s.plateau_end_epoch - 1) // s.decay_every + 1
    return max(s.warm_target * s.decay_factor**decays, s.floor_lr)


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)


def adamax_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamaxState, lr: float) -> None:
    """In-place Adamax update of every parameter that has a gradient.

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|);  theta <- theta - lr/(1 - b1^t) * m / (u + eps)
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    correction = lr / (1.0 - state.beta1**state.step)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.u[name] = np.zeros_like(p.data)
        m, u = state.m[name], state.u[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data -= correction * m / (u + state.eps)
