"""AdamW with decoupled weight decay and a linear warmup schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter
from .exceptions import ContractError, NumericError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One in-place AdamW update of ``params`` and ``state``.

    Non-finite gradients abort the step before anything is modified.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ContractError(f"gradient {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def step(self, lr: float | None = None) -> None:
        adamw_step({p.name: p.data for p in self.params}, {p.name: p.grad for p in self.params},
                   self.state, self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def warmup_steps(total_steps: int, warmup_proportion: float) -> int:
    return math.ceil(warmup_proportion * total_steps)


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_proportion: float = 0.05) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup steps, then constant."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    n_warm = warmup_steps(total_steps, warmup_proportion)
    if n_warm == 0 or step >= n_warm:
        return base_lr
    return base_lr * step / n_warm
