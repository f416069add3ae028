"""SGD with momentum and weight decay, step learning-rate schedule, EMA of weights."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

BASE_LR = 0.015
MOMENTUM = 0.9
WEIGHT_DECAY = 0.0004
MILESTONES = (11250, 13750)
TOTAL_ITERS = 15000
LR_GAMMA = 0.1
EMA_DECAY = 0.9998


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = MOMENTUM, weight_decay: float = WEIGHT_DECAY):
    """In-place update: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    ``velocity`` is filled lazily with zeros for parameters it lacks.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def lr_schedule(it: int, base_lr: float = BASE_LR, milestones=MILESTONES, gamma: float = LR_GAMMA) -> float:
    """Step decay: ``base_lr * gamma ** (number of milestones reached)``."""
    milestones = list(milestones)
    if milestones != sorted(milestones):
        raise ValueError(f"milestones must ascend, got {milestones}")
    return base_lr * gamma ** bisect_right(milestones, it)


def scaled_milestones(total_iters: int, reference_total: int = TOTAL_ITERS, reference=MILESTONES) -> tuple[int, ...]:
    """Milestones at the same fractions of a shorter run."""
    return tuple(int(round(m * total_iters / reference_total)) for m in reference)


@dataclass
class EmaState:
    decay: float = EMA_DECAY
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def from_params(cls, params: dict, decay: float = EMA_DECAY) -> "EmaState":
        return cls(decay, {k: v.copy() for k, v in params.items()})


def ema_update(state: EmaState, params: dict) -> EmaState:
    """``shadow = decay * shadow + (1 - decay) * param``, in place."""
    if set(state.shadow) != set(params):
        missing = set(params) ^ set(state.shadow)
        raise ValueError(f"EMA shadow and parameters differ in names: {sorted(missing)[:5]}")
    d = state.decay
    for name, p in params.items():
        s = state.shadow[name]
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow for {name} has shape {s.shape}, parameter has {p.shape}")
        s *= d
        s += (1 - d) * p
    return state
