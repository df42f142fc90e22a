"""
Optimisation utilities: AdamW with decoupled weight decay, global-norm
clipping, EMA updates and learning-rate schedules.

Defaults follow the training hyperparameter table: lr 1e-4, betas (0.9, 0.999),
weight decay 1e-2, eps 1e-8, gradient clipping at 1.0.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from core.errors import ConfigError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        for p, m in zip(params, self.m):
            if m.shape != p.shape:
                raise DimensionError(f"Moment shape {m.shape} != parameter shape {p.shape}")


def _param_label(p, i):
    return p.name or f"param[{i}]"


def adamw_step(params, grads, state: OptimizerState, lr: Optional[float] = None) -> OptimizerState:
    """One AdamW update in place on params; returns the advanced state."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"NaN/Inf gradient for {_param_label(p, i)}", name=_param_label(p, i))
    state.ensure(params)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * update
    return state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale all gradients by max_norm/||g|| when the global norm exceeds max_norm."""
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def ema_update(target: np.ndarray, source: np.ndarray, decay: float) -> np.ndarray:
    """target <- decay * target + (1 - decay) * source."""
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must be in [0, 1), got {decay}")
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if target.shape != source.shape:
        raise DimensionError(f"EMA shape mismatch: {target.shape} vs {source.shape}")
    return decay * target + (1.0 - decay) * source


# =============================================================================
# LEARNING-RATE SCHEDULES
# =============================================================================

def constant_with_warmup(base_lr: float, warmup_steps: int = 500) -> Callable[[int], float]:
    """Linear warm-up then constant (policy training)."""
    def schedule(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return base_lr * (step + 1) / warmup_steps
        return base_lr
    return schedule


def cosine_with_warmup(base_lr: float, warmup_steps: int, total_steps: int, min_ratio: float = 0.0,
                       anneal_steps: int = 0, anneal_final: float = 0.01) -> Callable[[int], float]:
    """Linear warm-up, cosine decay, then an exponential anneal over the last anneal_steps."""
    anneal_start = max(total_steps - anneal_steps, warmup_steps)
    decay_span = max(anneal_start - warmup_steps, 1)

    def schedule(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return base_lr * (step + 1) / warmup_steps
        progress = min((min(step, anneal_start) - warmup_steps) / decay_span, 1.0)
        lr = base_lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))
        if anneal_steps > 0 and step > anneal_start:
            lr *= anneal_final ** (min(step - anneal_start, anneal_steps) / anneal_steps)
        return lr
    return schedule


def make_schedule(name: str, base_lr: float, warmup_steps: int, total_steps: int = 0,
                  anneal_steps: int = 0) -> Callable[[int], float]:
    if name == "constant":
        return constant_with_warmup(base_lr, warmup_steps)
    if name == "cosine":
        return cosine_with_warmup(base_lr, warmup_steps, total_steps, anneal_steps=anneal_steps)
    raise ConfigError(f"Unknown LR schedule '{name}'")


class AdamW:
    """Stateful wrapper: optional clipping, scheduled lr, AdamW update."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), weight_decay=1e-2, eps=1e-8,
                 max_grad_norm: Optional[float] = 1.0, schedule: Optional[Callable[[int], float]] = None):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay, eps=eps)
        self.max_grad_norm = max_grad_norm
        self.schedule = schedule
        self.last_grad_norm = 0.0

    def current_lr(self) -> float:
        return self.schedule(self.state.step) if self.schedule else self.state.lr

    def step(self, grads):
        if self.max_grad_norm:
            grads, self.last_grad_norm = clip_global_norm(grads, self.max_grad_norm)
        else:
            self.last_grad_norm = global_norm(grads)
        lr = self.current_lr()
        adamw_step(self.params, grads, self.state, lr=lr)
        return lr

    def state_dict(self):
        out = {f"m.{i}": m.copy() for i, m in enumerate(self.state.m)}
        out.update({f"v.{i}": v.copy() for i, v in enumerate(self.state.v)})
        return out

    def load_state_dict(self, arrays, step: int):
        n = len(self.params)
        self.state.m = [np.array(arrays[f"m.{i}"]) for i in range(n)] if "m.0" in arrays else []
        self.state.v = [np.array(arrays[f"v.{i}"]) for i in range(n)] if "v.0" in arrays else []
        self.state.step = int(step)
