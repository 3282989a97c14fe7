"""Noise-prediction network for action-sequence diffusion.

Observation encoder: three strided convolutions and a spatial softmax, giving
two coordinates per keypoint channel for each of the two context images.
Sequence model: 1-D U-Net over (B, 2, L) with three resolution levels,
GroupNorm, SiLU and FiLM conditioning on [image keypoints, step embedding].
"""

import math

import numpy as np

from ..diffcore import ops
from ..diffcore.layers import MLP, Conv1d, Conv2d, GroupNorm, Linear, Module
from ..diffcore.tensor import ShapeError, Tensor
from .schemas import ACTION_DIM, OBS_SHAPE, PolicyConfig


def group_count(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0 and channels // groups >= 2:
            return groups
    return 1


def sinusoidal_embedding(steps: np.ndarray, dim: int) -> np.ndarray:
    """(B,) integer diffusion steps -> (B, dim) sin/cos features."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.asarray(steps, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


class KeypointEncoder(Module):
    """Image -> 2 * keypoints coordinates in [-1, 1]."""

    def __init__(self, keypoints: int, rng: np.random.Generator):
        self.conv1 = Conv2d(3, 8, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(8, 16, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(16, keypoints, 3, rng, stride=1, padding=1)

    def forward(self, images: Tensor) -> Tensor:
        h = ops.relu(self.conv1(images))
        h = ops.relu(self.conv2(h))
        return ops.spatial_softmax(self.conv3(h))


class FilmResBlock(Module):
    """Conv-GN-SiLU, FiLM, Conv-GN-SiLU with a 1x1 residual projection."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, rng: np.random.Generator):
        self.conv1 = Conv1d(in_ch, out_ch, 3, rng, padding=1)
        self.norm1 = GroupNorm(out_ch, group_count(out_ch))
        self.film = Linear(cond_dim, 2 * out_ch, rng)
        self.conv2 = Conv1d(out_ch, out_ch, 3, rng, padding=1)
        self.norm2 = GroupNorm(out_ch, group_count(out_ch))
        self.skip = Conv1d(in_ch, out_ch, 1, rng) if in_ch != out_ch else None
        self.out_ch = out_ch

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = ops.silu(self.norm1(self.conv1(x)))
        film = self.film(cond)
        batch = film.shape[0]
        scale = ops.reshape(film[:, : self.out_ch], (batch, self.out_ch, 1))
        shift = ops.reshape(film[:, self.out_ch :], (batch, self.out_ch, 1))
        h = h * (scale + 1.0) + shift
        h = ops.silu(self.norm2(self.conv2(h)))
        residual = self.skip(x) if self.skip is not None else x
        return h + residual


class DenoiserNet(Module):
    """epsilon_theta(a_k, k, o_{t-1}, o_t) with output shape equal to the action-sequence shape."""

    def __init__(
        self,
        config: PolicyConfig,
        rng: np.random.Generator,
        obs_shape: tuple[int, int, int] = OBS_SHAPE,
    ):
        self.obs_shape = tuple(obs_shape)
        self.step_dim = config.step_embed_dim
        c1, c2, c3 = config.base_channels, 2 * config.base_channels, 4 * config.base_channels
        obs_dim = 2 * 2 * config.keypoints
        cond_dim = obs_dim + self.step_dim

        self.encoder = KeypointEncoder(config.keypoints, rng)
        self.step_mlp = MLP([self.step_dim, 2 * self.step_dim, self.step_dim], rng)
        self.in_conv = Conv1d(ACTION_DIM, c1, 3, rng, padding=1)
        self.down1 = FilmResBlock(c1, c1, cond_dim, rng)
        self.pool1 = Conv1d(c1, c1, 3, rng, stride=2, padding=1)
        self.down2 = FilmResBlock(c1, c2, cond_dim, rng)
        self.pool2 = Conv1d(c2, c2, 3, rng, stride=2, padding=1)
        self.mid1 = FilmResBlock(c2, c3, cond_dim, rng)
        self.mid2 = FilmResBlock(c3, c3, cond_dim, rng)
        self.up2 = FilmResBlock(c3 + c2, c2, cond_dim, rng)
        self.up1 = FilmResBlock(c2 + c1, c1, cond_dim, rng)
        self.out_conv = Conv1d(c1, ACTION_DIM, 1, rng)
        # Zero head: an untrained net predicts zero noise.
        self.out_conv.weight.data = np.zeros_like(self.out_conv.weight.data)

    def condition(self, steps: np.ndarray, context: Tensor) -> Tensor:
        """(B,) steps and (B, 2, 3, H, W) context images -> (B, cond_dim)."""
        batch = context.shape[0]
        if context.shape[1:] != (2,) + self.obs_shape:
            raise ShapeError("denoiser.context", context.shape, (batch, 2) + self.obs_shape)
        images = ops.reshape(context, (batch * 2,) + self.obs_shape)
        keypoints = ops.reshape(self.encoder(images), (batch, -1))
        embedding = Tensor(sinusoidal_embedding(steps, self.step_dim), dtype=context.dtype)
        step_features = self.step_mlp(embedding)
        return ops.concat([keypoints, step_features], axis=1)

    def forward(self, noisy: Tensor, steps: np.ndarray, context: Tensor) -> Tensor:
        """noisy: (B, L, 2) normalized actions; steps: (B,) in 1..K."""
        batch, length, dim = noisy.shape
        if dim != ACTION_DIM:
            raise ShapeError("denoiser", noisy.shape, detail=f"last axis must be {ACTION_DIM}")
        cond = self.condition(np.asarray(steps).reshape(batch), context)

        padded_len = 4 * math.ceil(length / 4)
        x = ops.pad_last(ops.transpose(noisy, (0, 2, 1)), padded_len - length)
        x = self.in_conv(x)
        skip1 = self.down1(x, cond)
        skip2 = self.down2(self.pool1(skip1), cond)
        h = self.mid2(self.mid1(self.pool2(skip2), cond), cond)
        h = self.up2(ops.concat([ops.upsample1d(h, 2), skip2], axis=1), cond)
        h = self.up1(ops.concat([ops.upsample1d(h, 2), skip1], axis=1), cond)
        out = self.out_conv(h)[:, :, :length]
        return ops.transpose(out, (0, 2, 1))

    def predict(self, noisy: np.ndarray, steps: np.ndarray, context: np.ndarray) -> np.ndarray:
        """Graph-free evaluation on plain arrays; ``context`` may be a single (2, 3, H, W) pair."""
        context = np.asarray(context, dtype=np.float32)
        if context.ndim == 4:
            context = np.broadcast_to(context, (noisy.shape[0],) + context.shape)
        steps = np.broadcast_to(np.asarray(steps), (noisy.shape[0],))
        dtype = self.in_conv.weight.dtype
        out = self.forward(Tensor(noisy, dtype=dtype), steps, Tensor(context, dtype=dtype))
        return out.data
