"""Adam with bias-corrected moments and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "AdamConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        return self


class Adam:
    """Standard Adam; moments mirror parameter shapes, step counter 1-based."""

    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: AdamConfig | None = None):
        self.cfg = (cfg or AdamConfig()).validate()
        self.named_params = list(named_params)
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]
        self.step_count = 0

    def step(self, lr: float | None = None) -> None:
        """Apply one bias-corrected update from the accumulated .grad fields."""
        lr = self.cfg.lr if lr is None else lr
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TensorError(f"adam: non-finite gradient for parameter {name!r}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)

    def zero_grads(self) -> None:
        for _, p in self.named_params:
            p.grad = None


@dataclass
class OneCycleSchedule:
    """Linear warmup to max_lr, then cosine decay to floor_frac * max_lr."""

    max_lr: float
    warmup_steps: int
    total_steps: int
    floor_frac: float = 0.01

    def validate(self) -> "OneCycleSchedule":
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not (0 < self.floor_frac <= 1):
            raise ValueError("floor_frac must lie in (0, 1]")
        return self

    def lr(self, step: int) -> float:
        if not (0 <= step <= self.total_steps):
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        floor = self.floor_frac * self.max_lr
        if step <= self.warmup_steps:
            if self.warmup_steps == 0:
                return self.max_lr
            return floor + (self.max_lr - floor) * (step / self.warmup_steps)
        span = self.total_steps - self.warmup_steps
        progress = (step - self.warmup_steps) / span
        return floor + (self.max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def onecycle_lr(schedule: OneCycleSchedule, step: int) -> float:
    return schedule.validate().lr(step)
