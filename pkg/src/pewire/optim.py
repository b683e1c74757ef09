"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pewire.errors import NumericFault


def no_decay(name: str) -> bool:
    """LN affine parameters and the PE table are excluded from weight decay."""
    return name.endswith(".gamma") or name.endswith(".beta") or name == "pos_embed"


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adamw_step(state: OptimizerState, params, grads: dict[str, np.ndarray], lr: float) -> None:
    """One AdamW update of every trainable param in place (``param.data`` is replaced).

    ``params`` is a :class:`~pewire.model.ModelParams` or any iterable of
    :class:`~pewire.autodiff.Param`. Params without a gradient entry are
    treated as having a zero gradient.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for {name}; step aborted", op="adamw_step")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        theta = p.data
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(theta)
        state.ensure(p.name, theta)
        dt = theta.dtype.type
        m = state.m[p.name] = dt(b1) * state.m[p.name] + dt(1.0 - b1) * g
        v = state.v[p.name] = dt(b2) * state.v[p.name] + dt(1.0 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        update = m_hat / (np.sqrt(v_hat) + dt(state.eps))
        new = theta - dt(lr) * update
        if state.weight_decay and not no_decay(p.name):
            new = new - dt(lr * state.weight_decay) * theta
        p.data = new.astype(theta.dtype, copy=False)


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return min_lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
