"""Adaptive-moment optimizer with decoupled (multiplicative) weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    """Per-parameter moment buffers plus the step counter and hyperparameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
) -> tuple[dict[str, Tensor], OptimState]:
    """Apply one optimizer step in place; returns (params, state) for chaining.

    Decay is applied multiplicatively to the weights before the moment
    update, so a zero gradient with zero decay leaves parameters untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"opt_step: non-finite gradient for parameter '{name}'")

    state.step += 1
    t = state.step
    lr = state.learning_rate
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"opt_step: grad shape {g.shape} != param shape {p.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        if state.weight_decay != 0.0:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    return params, state


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients for every parameter; zeros for params off the backward path."""
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros(p.shape, dtype=np.float64)
    return out
