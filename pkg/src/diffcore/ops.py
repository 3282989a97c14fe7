"""Differentiable operations over ``Tensor``.

Every op computes its forward value with numpy and hands ``make_result`` a
vector-Jacobian product closure. Composite ops (norms, losses, spatial
softmax) are built from the primitives and inherit their gradients.
"""

from __future__ import annotations

from typing import Any, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ArrayLike, ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce_pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), vjp, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), vjp, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a, b)

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), vjp, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    def vjp(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return make_result(np.power(x.data, exponent), (x,), vjp, "power")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return make_result(y, (x,), lambda g: (0.5 * g / y,), "sqrt")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient passes only where the input was strictly inside the bounds."""
    y = np.clip(x.data, low, high)
    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data > low
    if high is not None:
        inside &= x.data < high

    return make_result(y, (x,), lambda g: (g * inside,), "clip")


def maximum_scalar(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient zero where the floor is active."""
    return clip(x, low=floor)


# ---------------------------------------------------------------------------
# Activations


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = x.data * s

    def vjp(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return make_result(y, (x,), vjp, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), vjp, "log_softmax")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation


def _normalize_axes(axis: Any, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y), (x,), vjp, "sum")


def mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), vjp, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return make_result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose"
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return make_result(y, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def take(x: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing (slice op)."""
    y = x.data[index]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(y), (x,), vjp, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        same_rank = t.ndim == ndim
        if not same_rank or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(data, tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# Linear algebra and convolutions


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), vjp, "matmul")


def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), weight: (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than input")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    flat_w = weight.data.reshape(o, -1)
    out = (cols @ flat_w.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ flat_w).reshape(n, ho, wo, c, kh, kw)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2)
                )
        gx = gpad[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, vjp, "conv2d")


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """1-D cross-correlation. x: (N, C, L), weight: (O, C, k)."""
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    n, c, length = x.shape
    o, _, k = weight.shape
    lo = conv_output_size(length, k, stride, padding)
    if lo <= 0:
        raise ShapeError("conv1d", x.shape, weight.shape, detail="kernel larger than input")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(padded, k, axis=2)[:, :, ::stride]
    cols = windows.transpose(0, 2, 1, 3).reshape(n * lo, c * k)
    flat_w = weight.data.reshape(o, -1)
    out = (cols @ flat_w.T).reshape(n, lo, o).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)

    def vjp(g):
        g2 = g.transpose(0, 2, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ flat_w).reshape(n, lo, c, k)
        gpad = np.zeros_like(padded)
        for i in range(k):
            gpad[:, :, i : i + stride * lo : stride] += gcols[..., i].transpose(0, 2, 1)
        grads = [gpad[:, :, padding : padding + length], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, vjp, "conv1d")


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    if x.ndim != 4 or x.shape[1] % (factor * factor):
        raise ShapeError("pixel_shuffle", x.shape, detail=f"channels not divisible by {factor}^2")
    n, cr, h, w = x.shape
    c = cr // (factor * factor)
    y = (
        x.data.reshape(n, c, factor, factor, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, h * factor, w * factor)
    )

    def vjp(g):
        back = g.reshape(n, c, h, factor, w, factor).transpose(0, 1, 3, 5, 2, 4)
        return (back.reshape(n, cr, h, w),)

    return make_result(y, (x,), vjp, "pixel_shuffle")


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    y = np.repeat(x.data, factor, axis=-1)

    def vjp(g):
        return (g.reshape(*x.shape, factor).sum(axis=-1),)

    return make_result(y, (x,), vjp, "upsample1d")


def pad_last(x: Tensor, right: int) -> Tensor:
    """Zero-pad the last axis on the right."""
    if right == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(0, right)]
    length = x.shape[-1]
    return make_result(
        np.pad(x.data, widths), (x,), lambda g: (g[..., :length],), "pad_last"
    )


# ---------------------------------------------------------------------------
# Discrete sampling


def categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Class index per leading position, drawn from the last-axis probabilities."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    index = (u >= cdf).sum(axis=-1)
    return np.minimum(index, probs.shape[-1] - 1)


def one_hot(index: np.ndarray, classes: int, dtype: Any = np.float32) -> np.ndarray:
    return np.eye(classes, dtype=dtype)[index]


def straight_through(
    probs: Tensor, rng: Optional[np.random.Generator] = None, mode: str = "sample"
) -> Tensor:
    """Forward: one-hot categorical draw (or mode). Backward: identity onto ``probs``."""
    if mode == "argmax" or rng is None:
        index = probs.data.argmax(axis=-1)
    elif mode == "sample":
        index = categorical_draw(probs.data, rng)
    else:
        raise ValueError(f"Unknown sampling mode: {mode}")
    sample = one_hot(index, probs.shape[-1], dtype=probs.dtype)
    return make_result(sample, (probs,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# Composites


def mse(prediction: Tensor, target: ArrayLike) -> Tensor:
    diff = sub(prediction, target)
    return mean(square(diff))


def sum_squared_error(prediction: Tensor, target: ArrayLike, batch_axis: int = 0) -> Tensor:
    """Per-sample summed squared error, averaged over the batch axis."""
    diff = square(sub(prediction, target))
    reduce_axes = tuple(a for a in range(diff.ndim) if a != batch_axis % diff.ndim)
    return mean(sum(diff, axis=reduce_axes))


def layer_norm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(square(centered), axis=-1, keepdims=True)
    y = mul(centered, power(add(var, eps), -0.5))
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def group_norm(
    x: Tensor,
    groups: int,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over channel groups of a (N, C, ...) tensor."""
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError("group_norm", x.shape, detail=f"{c} channels not divisible by {groups} groups")
    grouped = reshape(x, (n, groups, -1))
    mu = mean(grouped, axis=-1, keepdims=True)
    centered = sub(grouped, mu)
    var = mean(square(centered), axis=-1, keepdims=True)
    y = reshape(mul(centered, power(add(var, eps), -0.5)), x.shape)
    affine_shape = (1, c) + (1,) * (x.ndim - 2)
    if gamma is not None:
        y = mul(y, reshape(gamma, affine_shape))
    if beta is not None:
        y = add(y, reshape(beta, affine_shape))
    return y


def spatial_softmax(x: Tensor) -> Tensor:
    """(N, C, H, W) feature maps -> (N, 2C) expected keypoint coordinates in [-1, 1]."""
    n, c, h, w = x.shape
    attention = softmax(reshape(x, (n, c, h * w)), axis=-1)
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1).astype(x.dtype)
    keypoints = matmul(attention, Tensor(grid, dtype=x.dtype))
    return reshape(keypoints, (n, 2 * c))
