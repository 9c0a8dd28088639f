"""Nadam with momentum-schedule warmup, plus a reduce-on-plateau lr controller.

Both are deliberately stateful-but-plain: the states are dataclasses of
arrays and scalars so checkpointing can serialize them field by field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class NadamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule_decay: float = 0.004

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValidationError(
                f"beta1/beta2 must lie in (0, 1), got {self.beta1}/{self.beta2}"
            )
        if self.lr <= 0.0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.epsilon <= 0.0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.schedule_decay < 0.0:
            raise ValidationError(f"schedule_decay must be >= 0, got {self.schedule_decay}")


@dataclass
class NadamState:
    """First/second moments per parameter, step counter, momentum-schedule product."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    m_schedule: float = 1.0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "NadamState":
        return NadamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def nadam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: NadamState,
    cfg: NadamConfig,
    lr: float | None = None,
) -> None:
    """One in-place update of every parameter.

    The momentum coefficient warms up as mu_t = beta1*(1 - 0.5*0.96^(t*d));
    bias correction divides by the running product of the mu's rather than
    the plain 1 - beta1^t, and the update blends the bias-corrected raw
    gradient with the look-ahead first moment:

        theta -= lr * ((1-mu_t)*g_hat + mu_{t+1}*m_hat) / (sqrt(v_hat) + eps)

    `lr` overrides cfg.lr so a schedule can drive the live rate.
    """
    if lr is None:
        lr = cfg.lr
    missing = params.keys() - grads.keys()
    if missing:
        raise ValidationError(f"gradients missing for parameters: {sorted(missing)}")
    state.t += 1
    t, d = state.t, cfg.schedule_decay
    mu_t = cfg.beta1 * (1.0 - 0.5 * 0.96 ** (t * d))
    mu_next = cfg.beta1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * d))
    state.m_schedule *= mu_t
    g_corr = 1.0 / (1.0 - state.m_schedule)
    m_corr = 1.0 / (1.0 - state.m_schedule * mu_next)
    v_corr = 1.0 / (1.0 - cfg.beta2 ** t)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (1.0 - mu_t) * g_corr * g + mu_next * m_corr * m
        p -= lr * update / (np.sqrt(v * v_corr) + cfg.epsilon)


@dataclass
class PlateauConfig:
    monitor: str = "val_accuracy"
    factor: float = 0.9
    patience: int = 3
    min_delta: float = 1e-4
    cooldown: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValidationError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")


@dataclass
class PlateauState:
    best: float = -math.inf
    wait: int = 0
    cooldown_counter: int = 0


def plateau_update(
    state: PlateauState, cfg: PlateauConfig, metric: float, lr: float
) -> float:
    """Feed one epoch's monitored metric (maximized); returns the lr to use next.

    An improvement must beat the best seen by more than min_delta to reset
    the wait counter; `patience` consecutive non-improving epochs multiply
    lr by `factor` (floored at min_lr) and start the cooldown.
    """
    if not math.isfinite(metric):
        raise ValidationError(f"monitored metric must be finite, got {metric}")
    if state.cooldown_counter > 0:
        state.cooldown_counter -= 1
        state.wait = 0
    if metric > state.best + cfg.min_delta:
        state.best = metric
        state.wait = 0
    elif state.cooldown_counter <= 0:
        state.wait += 1
        if state.wait >= cfg.patience:
            lr = max(lr * cfg.factor, cfg.min_lr)
            state.cooldown_counter = cfg.cooldown
            state.wait = 0
    return lr
