"""Adam with linear warmup and global gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from latentflow.errors import ConfigError


@dataclass
class OptimConfig:
    lr: float = 2e-4
    warmup: int = 100
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.warmup < 0 or self.clip < 0:
            raise ConfigError(f"invalid optimizer settings {self}")


class Adam:
    """Updates only parameters with ``requires_grad`` set and a gradient present."""

    def __init__(self, params: Sequence, cfg: OptimConfig | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg or OptimConfig()
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def current_lr(self) -> float:
        if self.cfg.warmup == 0:
            return self.cfg.lr
        return self.cfg.lr * min(1.0, (self.t + 1) / self.cfg.warmup)

    def step(self) -> None:
        c = self.cfg
        active = [i for i, p in enumerate(self.params) if p.grad is not None and p.requires_grad]
        sq = sum(float(np.sum(self.params[i].grad.astype(np.float64) ** 2)) for i in active)
        norm = float(np.sqrt(sq))
        self.last_grad_norm = norm
        scale = c.clip / norm if c.clip > 0 and norm > c.clip else 1.0
        lr = self.current_lr()
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for i in active:
            p = self.params[i]
            g = p.grad * scale
            if c.weight_decay:
                g = g + c.weight_decay * p.data
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            update = lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
