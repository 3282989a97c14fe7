"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Parameter, Tensor, backward


def numeric_gradient(
    fn: Callable[[], Tensor], param: Parameter, h: float = 1e-3
) -> np.ndarray:
    """d fn / d param by central differences, perturbing one element at a time."""
    grad = np.zeros_like(param.data)
    base = param.data
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        param.data = plus.reshape(base.shape)
        f_plus = float(fn().data.reshape(-1)[0])
        minus = flat.copy()
        minus[i] -= h
        param.data = minus.reshape(base.shape)
        f_minus = float(fn().data.reshape(-1)[0])
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    param.data = base
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> float:
    """Max elementwise relative error; entries where both sides are below ``atol`` count as exact."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = (diff <= atol) | (scale <= atol)
    rel = np.where(small, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    atol: float = 1e-6,
) -> float:
    """Worst relative error between backward() and central differences over ``params``.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    Run in float64 for the stated tolerances.
    """
    named = {f"p{i}": p for i, p in enumerate(params)}
    with Graph(named) as graph:
        loss = fn()
    analytic = backward(graph, loss)

    worst = 0.0
    for key, param in named.items():
        numeric = numeric_gradient(fn, param, h)
        worst = max(worst, relative_error(analytic[key], numeric, atol))
    return worst
