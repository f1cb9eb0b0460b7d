"""AdamW: adaptive moments with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptState:
    """Per-parameter moment accumulators and hyper-parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_state(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
    """Fresh zeroed moments matching the given parameter arrays."""
    return OptState(
        lr=lr,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        weight_decay=weight_decay,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adamw_step(params, grads, state):
    """One decoupled-weight-decay adaptive update, in place on ``params``.

    Returns ``(params, state)``; the step counter is incremented and the
    moment accumulators decayed even for zero gradients.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class AdamW:
    """Object wrapper binding an OptState to a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = list(params)
        self.state = init_state(
            [p.data for p in self.params], lr, betas, eps, weight_decay
        )

    def step(self, grads):
        """``grads``: dict mapping parameter tensor -> gradient array."""
        arrs = [p.data for p in self.params]
        gs = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        adamw_step(arrs, gs, self.state)
