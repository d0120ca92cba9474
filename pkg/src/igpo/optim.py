"""Adam with decoupled weight decay, plus the SFT / RL learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, GradientStore
from .errors import ConfigError


@dataclass
class OptimizerState:
    """Per-parameter first/second moments and a step counter."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0


def init_optimizer_state(params: dict[str, Array]) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adam_update(
    params: dict[str, Array],
    grads: GradientStore,
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, Array], OptimizerState]:
    """One adaptive-moment step (in place); lr=0 leaves parameters unchanged."""
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for parameter '{name}'")
        if g.shape != p.shape:
            raise ConfigError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
    return params, state


@dataclass(frozen=True)
class ScheduleConfig:
    """Warmup-stable-decay (mode "sft") or warmup-then-linear-to-zero (mode "rl")."""

    mode: str  # "sft" | "rl"
    peak_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0  # sft floor at the end of decay
    decay_frac: float = 0.1  # sft: fraction of total steps spent decaying

    def __post_init__(self):
        if self.mode not in ("sft", "rl"):
            raise ConfigError(f"unknown schedule mode '{self.mode}'")
        if self.total_steps < self.warmup_steps:
            raise ConfigError("schedule horizon shorter than warmup")
        if self.peak_lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0.0 <= self.decay_frac <= 1.0:
            raise ConfigError("decay_frac must lie in [0, 1]")


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate at `step` (0-based, clamped to the horizon)."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    step = min(step, cfg.total_steps)
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.mode == "rl":
        span = cfg.total_steps - cfg.warmup_steps
        if span == 0:
            return 0.0 if step >= cfg.total_steps else cfg.peak_lr
        return cfg.peak_lr * (cfg.total_steps - step) / span
    decay_steps = int(round(cfg.decay_frac * cfg.total_steps))
    decay_start = cfg.total_steps - decay_steps
    if step <= decay_start or decay_steps == 0:
        return cfg.peak_lr
    frac = (step - decay_start) / decay_steps
    return cfg.peak_lr + (cfg.min_lr - cfg.peak_lr) * frac
