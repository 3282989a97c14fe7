"""
Diffusion policy: noise schedules, the forward noising process, the
noise-prediction loss, DDPM and DDIM samplers and policy training.

Samplers take a ``predict(noisy, steps, context) -> noise`` callable, so they
run against a trained ``DenoiserNet.predict`` or any toy predictor.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..diffcore import Graph, Tensor, ops
from ..diffcore.checkpoint import load_checkpoint, save_checkpoint
from ..diffcore.optim import AdamState, adam_step
from ..models.denoiser import DenoiserNet
from ..models.schemas import (
    OBS_SHAPE,
    OMEGA_MAX,
    V_MAX,
    PolicyConfig,
    PolicyTrainConfig,
    ScheduleKind,
)
from ..utils.seed_ledger import SeedLedger
from .dataset_service import Dataset, DatasetError, segment_starts

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
ACTION_LOW = np.array([0.0, -OMEGA_MAX], dtype=np.float32)
ACTION_HIGH = np.array([V_MAX, OMEGA_MAX], dtype=np.float32)


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables for steps 1..K stored at index k (index 0 is the clean sample, alpha_bar 1)."""

    kind: ScheduleKind
    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def alpha_bar(self, k):
        return self.alpha_bars[np.asarray(k)]


def make_schedule(K: int, kind: ScheduleKind = ScheduleKind.COSINE) -> NoiseSchedule:
    if K < 2:
        raise ValueError(f"Diffusion needs at least 2 steps, got K={K}")
    kind = ScheduleKind(kind)
    if kind == ScheduleKind.COSINE:
        t = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2.0) ** 2
        ratio = f[1:] / f[:-1]
        betas = np.clip(1.0 - ratio, 1e-8, MAX_BETA)
    elif kind == ScheduleKind.LINEAR:
        betas = np.linspace(1e-4, 0.02, K, dtype=np.float64)
    else:
        raise ValueError(f"Unknown schedule kind: {kind}")

    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    # sigma_k^2 = (1 - abar_{k-1}) / (1 - abar_k) * beta_k; zero at k = 1
    variance = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas
    return NoiseSchedule(
        kind=kind,
        K=K,
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bars=alpha_bars,
        sigmas=np.concatenate([[0.0], np.sqrt(variance)]),
    )


def _per_item(values: np.ndarray, ndim: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def noising(a0: np.ndarray, k, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_k) a0 + sqrt(1 - abar_k) eps; ``k`` is a step or one step per leading item."""
    if np.shape(eps) != np.shape(a0):
        raise ValueError(f"Noise shape {np.shape(eps)} does not match sample shape {np.shape(a0)}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"Diffusion step out of range 1..{sched.K}: {k}")
    abar = _per_item(sched.alpha_bar(k), np.ndim(a0))
    out = np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps
    return out.astype(np.asarray(a0).dtype)


@dataclass
class ActionStats:
    """Per-dimension mean and standard deviation of dataset actions."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_actions(cls, actions: np.ndarray) -> "ActionStats":
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6))

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return ((actions - self.mean) / self.std).astype(np.float32)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        """Back to action units, clamped to the robot limits."""
        actions = values * self.std + self.mean
        return np.clip(actions, ACTION_LOW, ACTION_HIGH).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ActionStats":
        return cls(np.asarray(payload["mean"], dtype=np.float64), np.asarray(payload["std"], dtype=np.float64))


def dp_loss(
    net: DenoiserNet,
    context: np.ndarray,
    actions: np.ndarray,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> Tensor:
    """MSE between drawn noise and the net's prediction at a random step per item.

    context: (B, 2, 3, H, W); actions: (B, L, 2) normalized.
    """
    batch = actions.shape[0]
    if batch == 0:
        raise ValueError("dp_loss needs a nonempty batch")
    dtype = net.in_conv.weight.dtype
    steps = rng.integers(1, sched.K + 1, size=batch)
    eps = rng.standard_normal(actions.shape).astype(dtype)
    noisy = noising(actions.astype(dtype), steps, eps, sched)
    prediction = net(Tensor(noisy, dtype=dtype), steps, Tensor(context, dtype=dtype))
    return ops.mse(prediction, Tensor(eps, dtype=dtype))


def ddpm_step(
    a_k: np.ndarray,
    k: int,
    predict: Predictor,
    context: np.ndarray,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    noise_scale: float = 1.0,
) -> np.ndarray:
    """Ancestral reverse step a_k -> a_{k-1}; ``noise_scale`` 0 makes it deterministic."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"Diffusion step out of range 1..{sched.K}: {k}")
    steps = np.full(a_k.shape[0], k)
    eps = predict(a_k, steps, context)
    beta, alpha, abar = sched.betas[k], sched.alphas[k], sched.alpha_bars[k]
    mean = (a_k - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)
    sigma = sched.sigmas[k] * noise_scale
    if k > 1 and sigma > 0:
        if rng is None:
            raise ValueError("ddpm_step needs an rng when noise is added")
        mean = mean + sigma * rng.standard_normal(a_k.shape)
    return mean.astype(a_k.dtype)


def ddim_timesteps(K: int, n_steps: int) -> list[int]:
    """Evenly spaced descending steps from K down to 1."""
    if n_steps > K:
        raise ValueError(f"n_steps ({n_steps}) must not exceed K ({K})")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    raw = np.round(np.linspace(K, 1, n_steps)).astype(int)
    return sorted(set(raw.tolist()), reverse=True)


def ddim_denoise(
    x: np.ndarray,
    predict: Predictor,
    context: np.ndarray,
    sched: NoiseSchedule,
    n_steps: int,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from x at step K to a clean normalized sample."""
    steps = ddim_timesteps(sched.K, n_steps)
    for i, k in enumerate(steps):
        k_next = steps[i + 1] if i + 1 < len(steps) else 0
        eps = predict(x, np.full(x.shape[0], k), context)
        abar, abar_next = sched.alpha_bars[k], sched.alpha_bars[k_next]
        a0_hat = (x - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
        x = (math.sqrt(abar_next) * a0_hat + math.sqrt(1.0 - abar_next) * eps).astype(x.dtype)
    return x


def ddim_sample(
    context: np.ndarray,
    n_candidates: int,
    n_steps: int,
    sched: NoiseSchedule,
    predict: Predictor,
    rng: np.random.Generator,
    seq_len: int,
    stats: ActionStats,
) -> np.ndarray:
    """``n_candidates`` sequences (n, seq_len, 2) in action units, one batched pass per step."""
    if n_steps > sched.K:
        raise ValueError(f"n_steps ({n_steps}) must not exceed K ({sched.K})")
    x = rng.standard_normal((n_candidates, seq_len, 2)).astype(np.float32)
    return stats.denormalize(ddim_denoise(x, predict, context, sched, n_steps))


class DiffusionPolicy:
    """Trained denoiser plus schedule and normalization: proposes candidate action sequences."""

    def __init__(
        self,
        config: PolicyConfig,
        net: DenoiserNet,
        stats: ActionStats,
        schedule: Optional[NoiseSchedule] = None,
    ):
        self.config = config
        self.net = net
        self.stats = stats
        self.schedule = schedule or make_schedule(config.diffusion_steps, config.schedule)

    def sample_candidates(
        self,
        obs_prev: np.ndarray,
        obs_now: np.ndarray,
        rng: np.random.Generator,
        n_candidates: Optional[int] = None,
        n_steps: Optional[int] = None,
    ) -> np.ndarray:
        context = np.stack([obs_prev, obs_now]).astype(np.float32)
        return ddim_sample(
            context,
            n_candidates or self.config.n_candidates,
            n_steps or self.config.sample_steps,
            self.schedule,
            self.net.predict,
            rng,
            self.config.sequence_length,
            self.stats,
        )

    def save(self, directory: Path) -> Path:
        metadata = {
            "T_F": self.config.horizon,
            "T_a": self.config.execute_steps,
            "K": self.config.diffusion_steps,
            "schedule": self.config.schedule.value,
            "normalization": self.stats.to_dict(),
            "obs_shape": list(self.net.obs_shape),
            "config": self.config.model_dump(mode="json"),
        }
        return save_checkpoint(directory, self.net.state_dict(), metadata)

    @classmethod
    def load(cls, directory: Path, rng: Optional[np.random.Generator] = None) -> "DiffusionPolicy":
        arrays, metadata = load_checkpoint(directory)
        config = PolicyConfig.model_validate(metadata["config"])
        obs_shape = tuple(metadata.get("obs_shape", OBS_SHAPE))
        net = DenoiserNet(config, rng or np.random.default_rng(0), obs_shape=obs_shape)
        net.load_state_dict(arrays)
        return cls(config, net, ActionStats.from_dict(metadata["normalization"]))


class DiffusionService:
    """Training-batch construction and the policy training loop."""

    def training_windows(self, dataset: Dataset, config: PolicyConfig) -> list[tuple[int, int]]:
        """(sequence, t) pairs with a full a_{t-1:t+T_F} window inside one training segment."""
        windows = []
        span = config.sequence_length
        for s in range(dataset.n_sequences):
            for start in segment_starts(dataset.seq_len, config.segment_len, config.segment_stride):
                for t in range(start + 1, start + config.segment_len - span + 2):
                    windows.append((s, t))
        # Overlapping segments repeat windows; keep each once.
        return sorted(set(windows))

    def make_batch(
        self,
        dataset: Dataset,
        windows: list[tuple[int, int]],
        stats: ActionStats,
        config: PolicyConfig,
        rng: np.random.Generator,
        batch_size: int,
    ) -> tuple[np.ndarray, np.ndarray]:
        picks = rng.integers(0, len(windows), size=batch_size)
        span = config.sequence_length
        context = np.empty((batch_size, 2) + dataset.observations.shape[2:], dtype=np.float32)
        actions = np.empty((batch_size, span, 2), dtype=np.float32)
        for b, idx in enumerate(picks):
            s, t = windows[idx]
            context[b, 0] = dataset.observations[s, t - 1]
            context[b, 1] = dataset.observations[s, t]
            actions[b] = dataset.actions[s, t - 1 : t - 1 + span]
        return context, stats.normalize(actions)

    def train(
        self,
        dataset: Dataset,
        config: PolicyConfig,
        train_config: PolicyTrainConfig,
        ledger: SeedLedger,
    ) -> tuple[DiffusionPolicy, list[tuple[int, float]]]:
        windows = self.training_windows(dataset, config)
        if not windows:
            raise DatasetError(
                f"Sequences of length {dataset.seq_len} yield no policy training windows "
                f"(segment {config.segment_len}, horizon {config.horizon})"
            )
        stats = ActionStats.from_actions(dataset.actions)
        net = DenoiserNet(config, ledger.rng("policy/init"), obs_shape=dataset.observations.shape[2:])
        policy = DiffusionPolicy(config, net, stats)
        batch_rng = ledger.rng("policy/batches")
        noise_rng = ledger.rng("policy/noise")
        params = dict(net.named_parameters())
        state = AdamState(lr=train_config.lr)
        log: list[tuple[int, float]] = []

        logger.info(
            f"Training diffusion policy: {net.num_parameters()} parameters, "
            f"{len(windows)} windows, {train_config.steps} steps"
        )
        running = []
        for step in range(1, train_config.steps + 1):
            context, actions = self.make_batch(
                dataset, windows, stats, config, batch_rng, train_config.batch_size
            )
            with Graph(params) as graph:
                loss = dp_loss(net, context, actions, policy.schedule, noise_rng)
            adam_step(state, params, graph.backward(loss))
            running.append(loss.item())
            if step % train_config.log_every == 0 or step == train_config.steps:
                mean_loss = float(np.mean(running))
                log.append((step, mean_loss))
                running = []
                logger.info(f"Policy step {step}/{train_config.steps}: loss {mean_loss:.4f}")

        logger.info(f"✅ Policy training finished (rejected updates: {state.rejected_steps})")
        return policy, log


# Global service instance
_diffusion_service: Optional[DiffusionService] = None


def get_diffusion_service() -> DiffusionService:
    """Get or create diffusion service instance."""
    global _diffusion_service
    if _diffusion_service is None:
        _diffusion_service = DiffusionService()
    return _diffusion_service
