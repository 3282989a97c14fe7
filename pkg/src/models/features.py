"""Observation feature encoder for goal distances."""

import numpy as np

from ..diffcore import ops
from ..diffcore.layers import MLP, Conv2d, Module
from ..diffcore.ops import conv_output_size
from ..diffcore.tensor import Tensor
from .schemas import OBS_SHAPE, FeatureConfig


class FeatureEncoder(Module):
    """Three strided convolutions and a three-layer fully connected head."""

    def __init__(self, config: FeatureConfig, rng: np.random.Generator, obs_shape=OBS_SHAPE):
        self.obs_shape = tuple(obs_shape)
        self.conv1 = Conv2d(obs_shape[0], 16, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(16, 32, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(32, 32, 3, rng, stride=2, padding=1)
        h, w = obs_shape[1], obs_shape[2]
        for _ in range(3):
            h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
        self.flat_dim = 32 * h * w
        self.head = MLP([self.flat_dim, config.hidden, config.hidden, config.feature_dim], rng, activation="relu")

    def forward(self, images: Tensor) -> Tensor:
        h = ops.relu(self.conv1(images))
        h = ops.relu(self.conv2(h))
        h = ops.relu(self.conv3(h))
        return self.head(ops.reshape(h, (images.shape[0], self.flat_dim)))

    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Graph-free features for (N, 3, H, W) or a single (3, H, W) image."""
        single = images.ndim == 3
        if single:
            images = images[None]
        dtype = self.conv1.weight.dtype
        chunks = [
            self.forward(Tensor(images[i : i + batch_size], dtype=dtype)).data
            for i in range(0, len(images), batch_size)
        ]
        out = np.concatenate(chunks, axis=0)
        return out[0] if single else out
