"""Adam / AdamW and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..layers import FrozenParameterError
from .model import Model, ParamKey


@dataclass
class Adam:
    """Adam with coupled L2 (``decoupled=False``) or AdamW decoupled weight decay.

    Only tunable tensors are ever touched; moments are kept in float64.
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    t: int = 0
    state: dict = field(default_factory=dict)

    def step(self, model: Model, grads: dict[ParamKey, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        touched = set()
        for key, g in grads.items():
            name, pname = key
            layer = model[name]
            if pname not in layer.tunable:
                raise FrozenParameterError(f"optimizer asked to update frozen {name}.{pname}")
            p = layer.params[pname]
            g = g.astype(np.float64)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m, v = self.state.get(key, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[key] = (m, v)
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                upd = upd + lr * self.weight_decay * p
            p -= upd.astype(p.dtype)
            touched.add(name)
        for name in touched:
            model[name].touch()


def constant_schedule(base_lr: float):
    return lambda step: base_lr


def cosine_schedule(base_lr: float, total_steps: int, warmup_steps: int = 0):
    """Linear warmup to ``base_lr`` then cosine decay to 0 over the remaining steps."""
    def lr_at(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return base_lr * (step + 1) / warmup_steps
        span = max(1, total_steps - warmup_steps)
        frac = min(1.0, (step - warmup_steps) / span)
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
    return lr_at
