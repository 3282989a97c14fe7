"""Adam with bias correction and global gradient-norm clipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 100.0
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    rejected_steps: int = 0


def global_norm(gradients: dict[str, np.ndarray]) -> float:
    total = 0.0
    for grad in gradients.values():
        total += float(np.sum(np.square(grad, dtype=np.float64)))
    return float(np.sqrt(total))


def adam_step(
    state: AdamState,
    parameters: dict[str, Parameter],
    gradients: dict[str, np.ndarray],
) -> bool:
    """Apply one Adam update in place of ``parameters`` (rebinding their data).

    Returns False, leaving parameters and moments untouched, when any gradient
    is non-finite.
    """
    for name, grad in gradients.items():
        if name not in parameters:
            raise KeyError(f"Gradient for unknown parameter: {name}")
        if grad.shape != parameters[name].shape:
            raise ShapeError("adam_step", parameters[name].shape, grad.shape, detail=name)

    norm = global_norm(gradients)
    if not np.isfinite(norm):
        state.rejected_steps += 1
        bad = [n for n, g in gradients.items() if not np.all(np.isfinite(g))]
        logger.warning(
            f"⚠️ Adam update rejected at step {state.step}: non-finite gradient in {bad[:3]}"
        )
        return False

    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-12)

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    for name, grad in gradients.items():
        param = parameters[name]
        g = grad * scale
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)
    return True
