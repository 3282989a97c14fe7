"""
World-model objective, posterior filtering, open-loop imagination and
truncated-BPTT training.

Action alignment: ``actions[t]`` is the command issued after observing
``o_t``; the update that produces the state for ``o_t`` consumes
``actions[t - 1]`` (the carried previous action at t = 0).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..diffcore import Graph, Tensor, ops
from ..diffcore.checkpoint import load_checkpoint, save_checkpoint
from ..diffcore.optim import AdamState, adam_step, global_norm
from ..models.mtrssm import MTRSSM, HierLatent, kl_categorical
from ..models.schemas import SampleMode, WmConfig, WmTrainConfig
from ..utils.seed_ledger import SeedLedger
from .dataset_service import Dataset, DatasetError, segment_starts

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("recon", "kl_low", "kl_high", "dl_pred")


@dataclass
class LossResult:
    total: Tensor
    components: dict[str, float]
    final_state: HierLatent
    last_action: np.ndarray


@dataclass
class Rollout:
    """Per-step states of a filtering or imagination run, batch-first."""

    states: list[HierLatent]
    kl_low: list[np.ndarray] = field(default_factory=list)
    predictions: Optional[np.ndarray] = None  # (B, T, 3, H, W)

    def stack(self, name: str) -> np.ndarray:
        """(B, T, dim) array of a state field such as ``d_h`` or ``d_l``."""
        return np.stack([getattr(s, name).data for s in self.states], axis=1)


def shifted_actions(actions: np.ndarray, first_prev: Optional[np.ndarray] = None) -> np.ndarray:
    """prev[t] = actions[t - 1]; prev[0] = ``first_prev`` (zeros by default). Batch-first."""
    prev = np.zeros_like(actions)
    prev[:, 1:] = actions[:, :-1]
    if first_prev is not None:
        prev[:, 0] = first_prev
    return prev


def _dtype(model: MTRSSM):
    return model.low_drive.weight.dtype


def wm_loss(
    model: MTRSSM,
    observations: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    init_state: Optional[HierLatent] = None,
    first_prev_action: Optional[np.ndarray] = None,
) -> LossResult:
    """Summed over steps: beta * max(KL, floor) per level + reconstruction SSE + d_l prediction SSE.

    observations: (B, T, 3, H, W); actions: (B, T, 2).
    """
    batch, steps = observations.shape[:2]
    if steps < 2:
        raise ValueError(f"World-model loss needs at least 2 steps, got {steps}")
    if actions.shape[:2] != (batch, steps):
        raise ValueError(f"Actions {actions.shape[:2]} do not align with observations {(batch, steps)}")

    c = model.config
    dtype = _dtype(model)
    state = init_state or model.initial_state(batch, dtype)
    prev_actions = shifted_actions(actions, first_prev_action).astype(dtype)
    obs = observations.astype(dtype)
    embeddings = ops.reshape(
        model.encode(Tensor(obs.reshape((batch * steps,) + obs.shape[2:]))), (batch, steps, -1)
    )

    terms = []
    sums = {name: 0.0 for name in LOSS_COMPONENTS}
    for t in range(steps):
        previous = state
        state, dists = model.filter_step(state, Tensor(prev_actions[:, t]), embeddings[:, t], rng)

        recon = ops.sum_squared_error(model.decode(state), obs[:, t])
        kl_low = ops.mean(kl_categorical(dists.post_low, dists.prior_low))
        terms.append(recon)
        terms.append(ops.maximum_scalar(kl_low, c.free_bits) * c.beta)
        sums["recon"] += recon.item()
        sums["kl_low"] += kl_low.item()

        if model.hierarchical:
            kl_high = ops.mean(kl_categorical(dists.post_high, dists.prior_high))
            predicted = model.predict_dl(previous)
            dl_pred = ops.sum_squared_error(predicted, state.d_l.detach())
            terms.append(ops.maximum_scalar(kl_high, c.free_bits) * c.beta)
            terms.append(dl_pred)
            sums["kl_high"] += kl_high.item()
            sums["dl_pred"] += dl_pred.item()

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    sums["total"] = total.item()
    return LossResult(total, sums, state.detach(), actions[:, -1].copy())


def filter_sequence(
    model: MTRSSM,
    observations: np.ndarray,
    actions: np.ndarray,
    rng: Optional[np.random.Generator],
    init_state: Optional[HierLatent] = None,
    first_prev_action: Optional[np.ndarray] = None,
    mode: SampleMode = SampleMode.SAMPLE,
    decode: bool = False,
) -> Rollout:
    """Posterior rollout; one state per observation. Inputs (T, ...) or batch-first (B, T, ...)."""
    if observations.ndim == len(model.obs_shape) + 1:
        observations, actions = observations[None], actions[None]
    if observations.shape[:2] != actions.shape[:2]:
        raise ValueError(
            f"Sequence length mismatch: {observations.shape[1]} observations, {actions.shape[1]} actions"
        )
    batch, steps = observations.shape[:2]
    dtype = _dtype(model)
    state = init_state or model.initial_state(batch, dtype)
    prev_actions = shifted_actions(actions, first_prev_action).astype(dtype)
    obs = observations.astype(dtype)

    states, kls, frames = [], [], []
    for t in range(steps):
        embedding = model.encode(Tensor(obs[:, t]))
        state, dists = model.filter_step(state, Tensor(prev_actions[:, t]), embedding, rng, mode)
        states.append(state)
        kls.append(kl_categorical(dists.post_low, dists.prior_low).data)
        if decode:
            frames.append(model.decode(state).data)
    predictions = np.stack(frames, axis=1) if decode else None
    return Rollout(states, kls, predictions)


def imagine(
    model: MTRSSM,
    init_state: HierLatent,
    actions: np.ndarray,
    horizon: int,
    rng: Optional[np.random.Generator],
    mode: SampleMode = SampleMode.SAMPLE,
) -> Rollout:
    """Open-loop prior rollout. ``actions[i]`` drives imagined step i + 1; returns ``horizon`` frames."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    if actions.ndim == 2:
        actions = np.broadcast_to(actions[None], (init_state.batch,) + actions.shape)
    if actions.shape[1] < horizon:
        raise ValueError(f"{actions.shape[1]} actions cannot drive a horizon of {horizon}")
    dtype = _dtype(model)
    state = init_state
    states, frames = [], []
    for i in range(horizon):
        state, _ = model.imagine_step(state, Tensor(actions[:, i].astype(dtype)), rng, mode)
        states.append(state)
        frames.append(model.decode(state).data)
    return Rollout(states, predictions=np.stack(frames, axis=1))


def reconstruction_mse(
    model: MTRSSM,
    observations: np.ndarray,
    actions: np.ndarray,
    rng: Optional[np.random.Generator],
) -> float:
    """Per-pixel MSE of decoded posterior states against the observed frames."""
    rollout = filter_sequence(model, observations, actions, rng, decode=True)
    target = observations if observations.ndim == rollout.predictions.ndim else observations[None]
    return float(np.mean((rollout.predictions - target) ** 2))


def rotation_loop_closure(
    model: MTRSSM,
    start_state: HierLatent,
    omega: float,
    dt: float,
    rng: Optional[np.random.Generator],
    mode: SampleMode = SampleMode.ARGMAX,
) -> tuple[float, float]:
    """Imagine a turn in place by one full revolution.

    ``omega`` is rounded so a whole number n of steps covers 2 pi. Returns
    (MSE first vs last frame, MSE first vs half-turn frame) of the first batch item.
    """
    if omega == 0 or dt <= 0:
        raise ValueError(f"A full turn needs nonzero omega and positive dt, got {omega}, {dt}")
    n = max(2, round(2 * np.pi / (abs(omega) * dt)))
    turn = np.sign(omega) * 2 * np.pi / (n * dt)
    actions = np.tile(np.array([0.0, turn]), (n + 1, 1))
    frames = imagine(model, start_state, actions, n + 1, rng, mode).predictions[0]
    first_last = float(np.mean((frames[0] - frames[n]) ** 2))
    first_mid = float(np.mean((frames[0] - frames[n // 2]) ** 2))
    return first_last, first_mid


def save_world_model(model: MTRSSM, directory: Path) -> Path:
    return save_checkpoint(directory, model.state_dict(), model.metadata())


def load_world_model(directory: Path) -> MTRSSM:
    arrays, metadata = load_checkpoint(directory)
    config = WmConfig.model_validate(metadata["config"])
    model = MTRSSM(config, np.random.default_rng(0), tuple(metadata["obs_shape"]))
    model.load_state_dict(arrays)
    return model


class WorldModelService:
    """TBPTT training over segmented dataset sequences."""

    def training_segments(self, dataset: Dataset, train: WmTrainConfig) -> list[tuple[int, int]]:
        return [
            (s, start)
            for s in range(dataset.n_sequences)
            for start in segment_starts(dataset.seq_len, train.segment_len, train.segment_stride)
        ]

    def tbptt_train(
        self,
        dataset: Dataset,
        config: WmConfig,
        train: WmTrainConfig,
        ledger: SeedLedger,
        model: Optional[MTRSSM] = None,
    ) -> tuple[MTRSSM, list[dict]]:
        """One log entry per window per batch per epoch; carried states are detached between windows.

        A trailing window shorter than two steps has no transition to learn from and is skipped.
        """
        segments = self.training_segments(dataset, train)
        if not segments:
            raise DatasetError(
                f"Sequences of length {dataset.seq_len} are shorter than the segment length {train.segment_len}"
            )
        if train.subseq_len < config.window and train.subseq_len < dataset.seq_len:
            logger.warning(
                f"⚠️ Subsequence {train.subseq_len} shorter than TBPTT window {config.window}"
            )

        name = "mtrssm" if config.hierarchical else "rssm"
        model = model or MTRSSM(config, ledger.rng(f"{name}/init"), dataset.observations.shape[2:])
        params = dict(model.named_parameters())
        state = AdamState(lr=train.lr)
        order_rng = ledger.rng(f"{name}/order")
        latent_rng = ledger.rng(f"{name}/latents")
        log: list[dict] = []

        logger.info(
            f"Training {name}: {model.num_parameters()} parameters, {len(segments)} segments, "
            f"{train.epochs} epochs"
        )
        for epoch in range(1, train.epochs + 1):
            order = order_rng.permutation(len(segments))
            epoch_totals = []
            for b in range(0, len(order), train.batch_size):
                picks = [segments[i] for i in order[b : b + train.batch_size]]
                offsets = order_rng.integers(0, train.segment_len - train.subseq_len + 1, size=len(picks))
                obs = np.stack(
                    [dataset.observations[s, st + o : st + o + train.subseq_len] for (s, st), o in zip(picks, offsets)]
                )
                acts = np.stack(
                    [dataset.actions[s, st + o : st + o + train.subseq_len] for (s, st), o in zip(picks, offsets)]
                )
                carried: Optional[HierLatent] = None
                carried_action: Optional[np.ndarray] = None
                for w, start in enumerate(range(0, train.subseq_len, config.window)):
                    end = min(start + config.window, train.subseq_len)
                    if end - start < 2:
                        logger.debug(f"Skipping trailing window {w} of length {end - start}")
                        continue
                    with Graph(params) as graph:
                        result = wm_loss(
                            model, obs[:, start:end], acts[:, start:end], latent_rng, carried, carried_action
                        )
                    grads = graph.backward(result.total)
                    norm = global_norm(grads)
                    adam_step(state, params, grads)
                    carried, carried_action = result.final_state, result.last_action
                    entry = {"epoch": epoch, "batch": b // train.batch_size, "window": w, "grad_norm": norm}
                    entry.update(result.components)
                    log.append(entry)
                    epoch_totals.append(result.components["total"])
            logger.info(
                f"{name} epoch {epoch}/{train.epochs}: mean window loss {np.mean(epoch_totals):.2f}"
            )

        logger.info(f"✅ {name} training finished (rejected updates: {state.rejected_steps})")
        return model, log


# Global service instance
_world_model_service: Optional[WorldModelService] = None


def get_world_model_service() -> WorldModelService:
    """Get or create world model service instance."""
    global _world_model_service
    if _world_model_service is None:
        _world_model_service = WorldModelService()
    return _world_model_service
