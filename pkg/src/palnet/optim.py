"""Adam with bias correction, plus the polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimError(Exception):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """One bias-corrected update; returns new params, mutates the state."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise OptimError(f"non-finite gradient for '{name}' at step {state.step}")
        if g.shape != params[name].shape:
            raise OptimError(f"gradient shape mismatch for '{name}'")
    state.step += 1
    t = state.step
    out = {}
    for name, theta in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**t)
        v_hat = state.v[name] / (1.0 - beta2**t)
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def poly_decay(lr0: float, step: int, total_steps: int, power: float = 1.0) -> float:
    """lr0 * (1 - step/total_steps)^power; reaches 0 at the final step."""
    if total_steps <= 0:
        raise OptimError("total_steps must be positive")
    if step > total_steps or step < 0:
        raise OptimError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power
