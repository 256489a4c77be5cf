"""AdamW, learning-rate schedules and best-epoch checkpoint selection.

All functions are pure state transitions: callers hold the state and get a
new one back (parameter tensors are updated in place).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import torch


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def decay_mask(named_params: Mapping[str, torch.Tensor]) -> dict[str, bool]:
    """Decay conv/linear weights only; biases and normalization parameters are exempt."""
    return {n: p.ndim > 1 for n, p in named_params.items()}


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
               state: AdamWState, config: OptimizerConfig, lr: float | None = None,
               decay: Mapping[str, bool] | None = None) -> AdamWState:
    """One bias-corrected Adam update with decoupled weight decay ``-lr * wd * theta``."""
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient trees differ: {sorted(set(params) ^ set(grads))[:3]}")
    lr = config.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    m_new, v_new = {}, {}
    for name in params:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: {tuple(p.shape)} vs {tuple(g.shape)}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        if decay is None or decay.get(name, True):
            p.mul_(1.0 - lr * config.weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + config.epsilon))
        m_new[name], v_new[name] = m, v
    return AdamWState(t, m_new, v_new)


@dataclass(frozen=True)
class CosineSchedule:
    eta_max: float
    eta_min: float
    total: float

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")
        if self.total < 1:
            raise ValueError("total must be >= 1")


def cosine_lr(schedule: CosineSchedule, t: float) -> float:
    """``eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2`` for t in [0, T]."""
    if not 0 <= t <= schedule.total:
        raise ValueError(f"t={t} outside [0, {schedule.total}]")
    if t == schedule.total:
        return schedule.eta_min
    return schedule.eta_min + 0.5 * (schedule.eta_max - schedule.eta_min) * (
        1.0 + math.cos(math.pi * t / schedule.total))


@dataclass(frozen=True)
class PlateauSchedule:
    """Reduce-on-plateau in maximize mode; improvement means strictly greater."""
    factor: float = 0.1
    patience: int = 10
    best: float = -math.inf
    stale: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d


def plateau_step(schedule: PlateauSchedule, metric: float, lr: float) -> tuple[PlateauSchedule, float]:
    if not math.isfinite(metric):
        raise ValueError(f"metric must be finite, got {metric}")
    if metric > schedule.best:
        return replace(schedule, best=metric, stale=0), lr
    stale = schedule.stale + 1
    if stale > schedule.patience:
        return replace(schedule, stale=0), lr * schedule.factor
    return replace(schedule, stale=stale), lr


def select_checkpoint(history: Sequence[tuple[int, float, Any]]) -> tuple[int, float, Any]:
    """Entry with the highest validation metric; the earliest epoch wins ties."""
    if not history:
        raise ValueError("empty history")
    best = None
    for entry in history:
        if not math.isfinite(entry[1]):
            raise ValueError(f"non-finite metric at epoch {entry[0]}")
        if best is None or entry[1] > best[1] or (entry[1] == best[1] and entry[0] < best[0]):
            best = entry
    return best
