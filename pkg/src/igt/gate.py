"""Log-space soft gate that fuses Idea Head predictions into token logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass
class GateConfig:
    alpha_max: float = 0.5
    ramp_steps: int = 1000
    beta: float = -2.0
    epsilon: float = 1e-6
    inference_alpha: float | None = None  # defaults to alpha_max

    def __post_init__(self):
        if self.inference_alpha is None:
            self.inference_alpha = self.alpha_max
        if self.alpha_max < 0:
            raise ValueError("alpha_max must be >= 0")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")
        if not self.beta < 0:
            raise ValueError("beta must be negative")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")


def alpha_at(step: int, cfg: GateConfig) -> float:
    """Linear ramp from 0 to ``alpha_max`` over ``ramp_steps``, flat afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.alpha_max * min(1.0, step / cfg.ramp_steps)


def compute_gate(z_idea: Tensor, alpha: float, cfg: GateConfig) -> Tensor:
    """``max(alpha * log(sigmoid(z_idea) + eps), beta)``, elementwise."""
    if not np.all(np.isfinite(z_idea.data)):
        raise FloatingPointError("non-finite idea logits")
    p_idea = tt.sigmoid(z_idea)
    penalty = tt.mul(tt.log(tt.add(p_idea, cfg.epsilon)), float(alpha))
    return tt.max_with_scalar(penalty, cfg.beta)


def fuse(z_token: Tensor, gate: Tensor) -> Tensor:
    if z_token.shape != gate.shape:
        raise tt.ShapeError(f"fuse: token logits {z_token.shape} vs gate {gate.shape}")
    return tt.add(z_token, gate)


def gated_logits(z_token: Tensor, z_idea: Tensor, alpha: float, cfg: GateConfig) -> Tensor:
    return fuse(z_token, compute_gate(z_idea, alpha, cfg))


def clamp_threshold(alpha: float, beta: float) -> float:
    """The value of ``p_idea + eps`` below which the gate sits at ``beta``."""
    return math.exp(beta / alpha) if alpha > 0 else 0.0
