"""Multiple-timescale recurrent state-space model.

State per step: slow level (u_h, d_h, s_h) and fast level (u_l, d_l, s_l).
Deterministic states are leaky integrators on pre-activations,
``u' = (1 - 1/tau) u + (1/tau) g`` with ``d = tanh(u)``; stochastic states are
one-hot categorical samples with straight-through gradients.

Step ordering (filtering and imagination alike):
    1. slow deterministic update from (d_h, s_h) of the previous step
    2. s_h from the slow posterior, conditioned on d_h and the previous d_l
    3. fast deterministic update from (d_l, s_l) previous, s_h now, a_{t-1}
    4. s_l from the fast posterior (filtering) or prior (imagination)

With ``hierarchical=False`` the slow level is absent and the model is a
single-level RSSM.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..diffcore import ops
from ..diffcore.layers import MLP, Conv2d, Linear, Module
from ..diffcore.ops import conv_output_size
from ..diffcore.tensor import ShapeError, Tensor
from .schemas import ACTION_DIM, OBS_SHAPE, SampleMode, WmConfig

KL_FLOOR = 1e-8


class StructureMismatchError(ValueError):
    """Raised when two categorical distributions have different variable/class layouts."""

    pass


class CatDist:
    """Independent categorical variables: logits and probabilities of shape (B, V, C)."""

    __slots__ = ("logits", "probs")

    def __init__(self, logits: Tensor):
        if logits.ndim < 2:
            raise ShapeError("CatDist", logits.shape, detail="need (..., variables, classes)")
        self.logits = logits
        self.probs = ops.softmax(logits, axis=-1)

    @classmethod
    def from_flat(cls, flat: Tensor, variables: int, classes: int) -> "CatDist":
        return cls(ops.reshape(flat, flat.shape[:-1] + (variables, classes)))

    @property
    def structure(self) -> tuple[int, int]:
        return self.logits.shape[-2], self.logits.shape[-1]

    def detach(self) -> "CatDist":
        return CatDist(self.logits.detach())


def kl_categorical(q: CatDist, p: CatDist) -> Tensor:
    """Sum over variables and classes of q (log q - log p); one value per leading item."""
    if q.structure != p.structure:
        raise StructureMismatchError(
            f"KL between structures {q.structure} and {p.structure}"
        )
    log_q = ops.log(ops.clip(q.probs, low=KL_FLOOR))
    log_p = ops.log(ops.clip(p.probs, low=KL_FLOOR))
    return ops.sum(q.probs * (log_q - log_p), axis=(-2, -1))


def sample_st(
    dist: CatDist, rng: Optional[np.random.Generator], mode: SampleMode = SampleMode.SAMPLE
) -> Tensor:
    """One-hot draw per variable; the gradient passes straight to the probabilities."""
    return ops.straight_through(dist.probs, rng, SampleMode(mode).value)


def leaky_integrate(u: Tensor, drive: Tensor, tau: float) -> Tensor:
    rate = 1.0 / tau
    return u * (1.0 - rate) + drive * rate


def _flatten_last2(x: Tensor) -> Tensor:
    return ops.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


@dataclass
class HierLatent:
    """MTRSSM state for a batch. Slow-level fields are None for the single-level model."""

    u_l: Tensor
    d_l: Tensor
    s_l: Tensor
    u_h: Optional[Tensor] = None
    d_h: Optional[Tensor] = None
    s_h: Optional[Tensor] = None

    @property
    def batch(self) -> int:
        return self.d_l.shape[0]

    @property
    def hierarchical(self) -> bool:
        return self.d_h is not None

    def detach(self) -> "HierLatent":
        return HierLatent(
            *(None if v is None else v.detach() for v in
              (self.u_l, self.d_l, self.s_l, self.u_h, self.d_h, self.s_h))
        )

    def high_features(self) -> Tensor:
        return ops.concat([self.d_h, _flatten_last2(self.s_h)], axis=-1)

    def low_features(self) -> Tensor:
        return ops.concat([self.d_l, _flatten_last2(self.s_l)], axis=-1)

    def features(self) -> Tensor:
        """Decoder input: [z_h, z_l] (or z_l alone)."""
        if self.hierarchical:
            return ops.concat([self.high_features(), self.low_features()], axis=-1)
        return self.low_features()

    def repeat(self, times: int) -> "HierLatent":
        """Tile each batch item ``times`` times along the batch axis (item-major)."""

        def tile(v: Optional[Tensor]) -> Optional[Tensor]:
            if v is None:
                return None
            return Tensor(np.repeat(v.data, times, axis=0))

        return HierLatent(*(tile(v) for v in (self.u_l, self.d_l, self.s_l, self.u_h, self.d_h, self.s_h)))

    def select(self, index) -> "HierLatent":
        def pick(v: Optional[Tensor]) -> Optional[Tensor]:
            return None if v is None else Tensor(v.data[index])

        return HierLatent(*(pick(v) for v in (self.u_l, self.d_l, self.s_l, self.u_h, self.d_h, self.s_h)))


@dataclass
class StepDists:
    """Distributions produced by one step (high entries None when absent)."""

    prior_low: CatDist
    post_low: Optional[CatDist] = None
    prior_high: Optional[CatDist] = None
    post_high: Optional[CatDist] = None


class ObsEncoder(Module):
    """Three convolutions, flatten and project to the embedding size."""

    def __init__(self, channels: tuple[int, int, int], embed_dim: int, obs_shape, rng):
        c1, c2, c3 = channels
        self.conv1 = Conv2d(obs_shape[0], c1, 3, rng, stride=1, padding=1)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(c2, c3, 3, rng, stride=2, padding=1)
        h, w = obs_shape[1], obs_shape[2]
        for stride in (1, 2, 2):
            h, w = conv_output_size(h, 3, stride, 1), conv_output_size(w, 3, stride, 1)
        self.flat_dim = c3 * h * w
        self.proj = Linear(self.flat_dim, embed_dim, rng)

    def forward(self, images: Tensor) -> Tensor:
        h = ops.relu(self.conv1(images))
        h = ops.relu(self.conv2(h))
        h = ops.relu(self.conv3(h))
        return self.proj(ops.reshape(h, (images.shape[0], self.flat_dim)))


class ResBlock2d(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.relu(self.conv1(x)))


class ObsDecoder(Module):
    """Latent features -> (3, H, W) in [0, 1] via residual blocks and two pixel shuffles."""

    def __init__(self, in_dim: int, channels: int, res_blocks: int, obs_shape, rng):
        if obs_shape[1] % 4 or obs_shape[2] % 4:
            raise ShapeError("ObsDecoder", tuple(obs_shape), detail="height and width must be divisible by 4")
        self.channels = channels
        self.grid = (obs_shape[1] // 4, obs_shape[2] // 4)
        half = max(channels // 2, 4)
        self.proj = Linear(in_dim, channels * self.grid[0] * self.grid[1], rng)
        self.blocks = [ResBlock2d(channels, rng) for _ in range(res_blocks)]
        self.up1 = Conv2d(channels, 4 * half, 3, rng, padding=1)
        self.up2 = Conv2d(half, 4 * obs_shape[0], 3, rng, padding=1)

    def forward(self, features: Tensor) -> Tensor:
        batch = features.shape[0]
        h = ops.reshape(self.proj(features), (batch, self.channels) + self.grid)
        for block in self.blocks:
            h = block(h)
        h = ops.relu(ops.pixel_shuffle(self.up1(h), 2))
        return ops.sigmoid(ops.pixel_shuffle(self.up2(h), 2))


class MTRSSM(Module):
    """Two-level world model (or the single-level RSSM when ``config.hierarchical`` is False)."""

    def __init__(
        self,
        config: WmConfig,
        rng: np.random.Generator,
        obs_shape: tuple[int, int, int] = OBS_SHAPE,
    ):
        self.config = config
        self.obs_shape = tuple(obs_shape)
        c = config
        self.sh_dim = c.s_h_vars * c.s_h_classes if c.hierarchical else 0
        self.sl_dim = c.s_l_vars * c.s_l_classes

        self.encoder = ObsEncoder(c.encoder_channels, c.embed_dim, self.obs_shape, rng)
        if c.hierarchical:
            self.high_drive = Linear(c.d_h + self.sh_dim, c.d_h, rng)
            self.prior_high_head = Linear(c.d_h, self.sh_dim, rng)
            self.post_high_head = MLP([c.d_h + c.d_l, c.hidden, self.sh_dim], rng)
            self.dl_head = MLP([c.d_h + self.sh_dim, c.hidden, c.d_l], rng)
        self.low_drive = Linear(c.d_l + self.sl_dim + self.sh_dim + ACTION_DIM, c.d_l, rng)
        self.prior_low_head = Linear(c.d_l, self.sl_dim, rng)
        self.post_low_head = MLP([c.d_l + c.embed_dim, c.hidden, self.sl_dim], rng)
        decoder_in = c.d_l + self.sl_dim + (c.d_h + self.sh_dim if c.hierarchical else 0)
        self.decoder = ObsDecoder(
            decoder_in, c.decoder_channels, c.decoder_res_blocks, self.obs_shape, rng
        )

    @property
    def hierarchical(self) -> bool:
        return self.config.hierarchical

    @property
    def tau_low(self) -> float:
        return self.config.tau_l if self.hierarchical else 1.0

    # ------------------------------------------------------------------
    # Components

    def initial_state(self, batch: int, dtype=np.float32) -> HierLatent:
        """Zero integrators, d = tanh(0), and every categorical variable on class 0."""
        c = self.config

        def one_hot0(variables: int, classes: int) -> Tensor:
            s = np.zeros((batch, variables, classes), dtype=dtype)
            s[..., 0] = 1.0
            return Tensor(s)

        state = HierLatent(
            u_l=Tensor(np.zeros((batch, c.d_l), dtype=dtype)),
            d_l=Tensor(np.zeros((batch, c.d_l), dtype=dtype)),
            s_l=one_hot0(c.s_l_vars, c.s_l_classes),
        )
        if self.hierarchical:
            state.u_h = Tensor(np.zeros((batch, c.d_h), dtype=dtype))
            state.d_h = Tensor(np.zeros((batch, c.d_h), dtype=dtype))
            state.s_h = one_hot0(c.s_h_vars, c.s_h_classes)
        return state

    def encode(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, embed_dim)."""
        return self.encoder(images)

    def high_step(self, u_h: Tensor, d_h: Tensor, s_h_prev: Tensor) -> tuple[Tensor, Tensor]:
        drive = self.high_drive(ops.concat([d_h, _flatten_last2(s_h_prev)], axis=-1))
        u = leaky_integrate(u_h, drive, self.config.tau_h)
        return u, ops.tanh(u)

    def low_step(
        self,
        u_l: Tensor,
        d_l_prev: Tensor,
        s_l_prev: Tensor,
        s_h_now: Optional[Tensor],
        a_prev: Tensor,
    ) -> tuple[Tensor, Tensor]:
        parts = [d_l_prev, _flatten_last2(s_l_prev)]
        if self.hierarchical:
            parts.append(_flatten_last2(s_h_now))
        parts.append(a_prev)
        drive = self.low_drive(ops.concat(parts, axis=-1))
        u = leaky_integrate(u_l, drive, self.tau_low)
        return u, ops.tanh(u)

    def prior_high(self, d_h: Tensor) -> CatDist:
        c = self.config
        return CatDist.from_flat(self.prior_high_head(d_h), c.s_h_vars, c.s_h_classes)

    def prior_low(self, d_l: Tensor) -> CatDist:
        c = self.config
        return CatDist.from_flat(self.prior_low_head(d_l), c.s_l_vars, c.s_l_classes)

    def posterior_high(self, d_h: Tensor, d_l_prev: Tensor) -> CatDist:
        c = self.config
        logits = self.post_high_head(ops.concat([d_h, d_l_prev], axis=-1))
        return CatDist.from_flat(logits, c.s_h_vars, c.s_h_classes)

    def posterior_low(self, d_l: Tensor, embedding: Tensor) -> CatDist:
        c = self.config
        logits = self.post_low_head(ops.concat([d_l, embedding], axis=-1))
        return CatDist.from_flat(logits, c.s_l_vars, c.s_l_classes)

    def decode(self, state: HierLatent) -> Tensor:
        return self.decoder(state.features())

    def predict_dl(self, state: HierLatent) -> Tensor:
        """Mean of the slow level's Gaussian prediction of the next d_l, from z_h."""
        return self.dl_head(state.high_features())

    # ------------------------------------------------------------------
    # Steps

    def _advance_high(
        self, state: HierLatent, rng, mode: SampleMode
    ) -> tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor], Optional[CatDist], Optional[CatDist]]:
        if not self.hierarchical:
            return None, None, None, None, None
        u_h, d_h = self.high_step(state.u_h, state.d_h, state.s_h)
        post_h = self.posterior_high(d_h, state.d_l)
        prior_h = self.prior_high(d_h)
        s_h = sample_st(post_h, rng, mode)
        return u_h, d_h, s_h, post_h, prior_h

    def filter_step(
        self,
        state: HierLatent,
        a_prev: Tensor,
        embedding: Tensor,
        rng: Optional[np.random.Generator],
        mode: SampleMode = SampleMode.SAMPLE,
    ) -> tuple[HierLatent, StepDists]:
        u_h, d_h, s_h, post_h, prior_h = self._advance_high(state, rng, mode)
        u_l, d_l = self.low_step(state.u_l, state.d_l, state.s_l, s_h, a_prev)
        post_l = self.posterior_low(d_l, embedding)
        prior_l = self.prior_low(d_l)
        s_l = sample_st(post_l, rng, mode)
        new_state = HierLatent(u_l=u_l, d_l=d_l, s_l=s_l, u_h=u_h, d_h=d_h, s_h=s_h)
        return new_state, StepDists(prior_low=prior_l, post_low=post_l, prior_high=prior_h, post_high=post_h)

    def imagine_step(
        self,
        state: HierLatent,
        a_prev: Tensor,
        rng: Optional[np.random.Generator],
        mode: SampleMode = SampleMode.SAMPLE,
    ) -> tuple[HierLatent, StepDists]:
        u_h, d_h, s_h, post_h, prior_h = self._advance_high(state, rng, mode)
        u_l, d_l = self.low_step(state.u_l, state.d_l, state.s_l, s_h, a_prev)
        prior_l = self.prior_low(d_l)
        s_l = sample_st(prior_l, rng, mode)
        new_state = HierLatent(u_l=u_l, d_l=d_l, s_l=s_l, u_h=u_h, d_h=d_h, s_h=s_h)
        return new_state, StepDists(prior_low=prior_l, prior_high=prior_h, post_high=post_h)

    def metadata(self) -> dict:
        c = self.config
        return {
            "tau_h": c.tau_h if self.hierarchical else None,
            "tau_l": self.tau_low,
            "latent": {
                "d_h": c.d_h if self.hierarchical else 0,
                "d_l": c.d_l,
                "s_h": [c.s_h_vars, c.s_h_classes] if self.hierarchical else None,
                "s_l": [c.s_l_vars, c.s_l_classes],
            },
            "beta": c.beta,
            "free_bits": c.free_bits,
            "obs_shape": list(self.obs_shape),
            "config": c.model_dump(mode="json"),
        }


def rssm_variant(config: WmConfig, rng: np.random.Generator, obs_shape=OBS_SHAPE) -> MTRSSM:
    """Single-level RSSM with the same widths: one deterministic state at tau 1, one categorical state."""
    return MTRSSM(config.single_level(), rng, obs_shape)
