"""AdamW and the one-cycle learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet

__all__ = ["OptimizerState", "adamw_step", "onecycle_lr", "OneCycle"]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adamw_step(state: OptimizerState, params: ParamSet, grads: dict[str, np.ndarray],
               lr: float | None = None) -> OptimizerState:
    """One AdamW update, in place on ``params`` and ``state``.

    Weight decay is decoupled: the parameter shrinks by ``lr * wd * p``
    before the bias-corrected Adam step, independent of the gradient.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    names = params.names()
    missing = [n for n in names if n not in grads]
    if missing:
        raise ValueError(f"missing gradients for {missing[:3]}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in names:
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return state


def onecycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                div_start: float = 25.0, div_final: float = 1e4) -> float:
    """Single-cycle cosine schedule.

    Rises from ``max_lr / div_start`` at step 0 to ``max_lr`` at
    ``round(pct_start * total_steps)``, then cosine-anneals towards
    ``max_lr / div_final``, reached at ``total_steps``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if max_lr <= 0:
        raise ValueError("max_lr must be positive")
    peak = int(math.floor(pct_start * total_steps + 0.5))
    start = max_lr / div_start
    final = max_lr / div_final
    if step < peak:
        frac, lo, hi = step / peak, start, max_lr
    else:
        frac, lo, hi = (step - peak) / (total_steps - peak), max_lr, final
    return hi + (lo - hi) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OneCycle:
    total_steps: int
    max_lr: float
    pct_start: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4

    def __call__(self, step: int) -> float:
        return onecycle_lr(step, self.total_steps, self.max_lr, self.pct_start,
                           self.div_start, self.div_final)
