"""Adam with classic L2 weight decay, plus the step-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    initial_lr: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.initial_lr is None:
            self.initial_lr = self.lr


def _named(params) -> Mapping[str, Tensor]:
    if hasattr(params, "named_parameters"):
        return dict(params.named_parameters())
    return params


def adam_step(params, state: AdamState) -> None:
    """Apply one Adam update to every parameter, then clear the grads.

    ``params`` is a name -> Tensor mapping or anything with
    ``named_parameters()``. Weight decay is added to the gradient before the
    moment updates.
    """
    named = _named(params)
    missing = [name for name, p in named.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")

    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named.items():
        g = p.grad
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
        p.grad = None


def halve_lr_schedule(state: AdamState, episode_count: int, interval: int) -> None:
    """Set lr = initial_lr * 0.5 ** floor(episode_count / interval)."""
    if interval <= 0:
        raise ValueError("lr halving interval must be positive")
    state.lr = state.initial_lr * 0.5 ** (episode_count // interval)
