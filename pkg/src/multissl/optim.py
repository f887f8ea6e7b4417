"""AdamW with decoupled weight decay and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE, Parameter
from .errors import ConfigError


def adamw_step(param: Parameter, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Parameter:
    """One AdamW update in place.

    Moments use the standard bias correction; weight decay is decoupled,
    i.e. applied as ``value -= lr * weight_decay * value`` independently of
    the adaptive term. Raises if the gradient is non-finite.
    """
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ConfigError(f"betas must lie in (0, 1), got ({beta1}, {beta2})")
    if eps <= 0.0:
        raise ConfigError(f"eps must be positive, got {eps}")
    param.check_grad_finite()

    g = param.grad
    param.step_count += 1
    t = param.step_count

    b1 = DTYPE(beta1)
    b2 = DTYPE(beta2)
    param.moment1 *= b1
    param.moment1 += (DTYPE(1) - b1) * g
    param.moment2 *= b2
    param.moment2 += (DTYPE(1) - b2) * (g * g)

    m_hat = param.moment1 / DTYPE(1.0 - beta1 ** t)
    v_hat = param.moment2 / DTYPE(1.0 - beta2 ** t)

    update = DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(eps))
    if weight_decay != 0.0:
        update = update + DTYPE(lr) * DTYPE(weight_decay) * param.value.data
    param.value.data -= update
    return param


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with warm restarts.

    ``period0`` is the length of the first cycle in steps; each restart
    multiplies the period by ``period_mult``.
    """

    base_lr: float
    min_lr: float = 0.0
    period0: int = 1000
    period_mult: int = 1

    def __post_init__(self):
        if self.base_lr <= 0.0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.min_lr < 0.0 or self.min_lr > self.base_lr:
            raise ConfigError("min_lr must satisfy 0 <= min_lr <= base_lr")
        if self.period0 < 1:
            raise ConfigError(f"period0 must be a positive step count, got {self.period0}")
        if self.period_mult < 1:
            raise ConfigError(f"period_mult must be >= 1, got {self.period_mult}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a global step index (0-based)."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if schedule.period_mult == 1:
        t = step % schedule.period0
        period = schedule.period0
    else:
        t = step
        period = schedule.period0
        while t >= period:
            t -= period
            period *= schedule.period_mult
    span = schedule.base_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * t / period))


class AdamW:
    """Convenience wrapper stepping a fixed list of parameters together."""

    def __init__(self, params, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, lr: float) -> None:
        for p in self.params:
            adamw_step(p, lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        """Moment buffers and step counts keyed by parameter name."""
        return {p.name: (p.moment1.copy(), p.moment2.copy(), p.step_count) for p in self.params}

    def load_state(self, state: dict) -> None:
        for p in self.params:
            if p.name in state:
                m1, m2, t = state[p.name]
                p.moment1[...] = m1
                p.moment2[...] = m2
                p.step_count = int(t)
