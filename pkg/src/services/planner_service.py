"""
Expected-free-energy planning.

Each candidate action sequence is imagined with M slow-level threads, each
branching into N fast-level threads. Per imagined step and thread, the
decoded observation is re-encoded to form the fast posterior; the KL between
that posterior and the fast prior is the epistemic value, and the squared
feature distance between the decoded observation and the goal image is the
extrinsic cost. Both are averaged over threads and steps:

    G = -w_epi * mean(KL) + precision(n) * mean(distance)

and the candidate with the lowest G is executed for T_a steps.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..diffcore import Tensor
from ..models.features import FeatureEncoder
from ..models.mtrssm import MTRSSM, HierLatent, kl_categorical, sample_st
from ..models.schemas import (
    Action,
    CandidateScore,
    EpisodeLimits,
    EpisodeSummary,
    Facing,
    PlannerConfig,
    PlannerMode,
    PlanningRecord,
    Pose,
    PrecisionSchedule,
    SampleMode,
    StepRecord,
    WorldSpec,
)
from ..utils.geometry import goal_check
from ..utils.seed_ledger import SeedLedger
from .diffusion_service import DiffusionPolicy
from .simulator_service import SimulatorService, get_simulator_service
from .world_model_service import filter_sequence

logger = logging.getLogger(__name__)


class GoalSpecError(ValueError):
    """Raised when an episode's goal cannot be reached or does not match the world."""

    pass


def precision(n: float, schedule: Optional[PrecisionSchedule] = None) -> float:
    """Sigmoidal precision of the extrinsic term at planning iteration ``n``."""
    s = schedule or PrecisionSchedule()
    z = -s.slope * (n - s.midpoint)
    # exp overflow for very negative n: the sigmoid term is then 0
    if z > 700:
        return s.floor
    return s.floor + (s.ceiling - s.floor) / (1.0 + math.exp(z))


@dataclass
class EfeBreakdown:
    epistemic_steps: np.ndarray  # mean KL per imagined step
    extrinsic_steps: np.ndarray  # mean squared feature distance per imagined step
    precision: float
    epistemic_weight: float
    epistemic: float
    extrinsic: float
    total: float
    mean_omega: float

    def score(self) -> CandidateScore:
        return CandidateScore(
            epistemic=self.epistemic,
            extrinsic=self.extrinsic,
            total=self.total,
            mean_omega=self.mean_omega,
        )


def efe_total(epistemic: float, extrinsic: float, precision_value: float, epistemic_weight: float = 1.0) -> float:
    return -epistemic_weight * epistemic + precision_value * extrinsic


def _as_tensor(a: Optional[np.ndarray]) -> Optional[Tensor]:
    return None if a is None else Tensor(a)


def efe_evaluate(
    candidate: np.ndarray,
    latent: HierLatent,
    goal_features: np.ndarray,
    wm: MTRSSM,
    encoder: FeatureEncoder,
    config: PlannerConfig,
    precision_value: float,
    rng: Optional[np.random.Generator],
    epistemic_weight: float = 1.0,
    execute_steps: Optional[int] = None,
) -> EfeBreakdown:
    """Score one candidate a_{t-1:t+T_F} from the filtered latent at time t (batch of one)."""
    if candidate.ndim != 2 or len(candidate) < 2:
        raise ValueError(f"Candidate must be (L >= 2, 2), got {candidate.shape}")
    if latent.batch != 1 or latent.hierarchical != wm.hierarchical:
        raise ValueError("efe_evaluate needs a single filtered latent matching the world model")

    mode = config.sample_mode
    future = candidate[1:]
    horizon = min(len(future), config.horizon or len(future))
    m = config.m_samples if wm.hierarchical else 1
    n = config.n_samples if wm.hierarchical else config.m_samples * config.n_samples
    threads = m * n
    dtype = wm.low_drive.weight.dtype

    low = latent.repeat(threads)
    high = latent.repeat(m) if wm.hierarchical else None
    epistemic = np.zeros(horizon)
    extrinsic = np.zeros(horizon)

    for tau in range(horizon):
        a_prev = Tensor(np.repeat(future[tau][None], threads, axis=0).astype(dtype))
        s_h_threads = None
        if wm.hierarchical:
            # (1) slow deterministic update, one per slow thread
            u_h, d_h = wm.high_step(high.u_h, high.d_h, high.s_h)
            # (2) slow posterior on the branch-mean d_l of the previous step
            d_l_mean = low.d_l.data.reshape(m, n, -1).mean(axis=1)
            s_h = sample_st(wm.posterior_high(d_h, Tensor(d_l_mean.astype(dtype))), rng, mode)
            high = HierLatent(u_l=high.u_l, d_l=high.d_l, s_l=high.s_l, u_h=u_h, d_h=d_h, s_h=s_h)
            s_h_threads = Tensor(np.repeat(s_h.data, n, axis=0))
        # (3) fast deterministic update per thread
        u_l, d_l = wm.low_step(low.u_l, low.d_l, low.s_l, s_h_threads, a_prev)
        # (4) fast prior sample
        prior_l = wm.prior_low(d_l)
        s_l = sample_st(prior_l, rng, mode)
        imagined = HierLatent(
            u_l=u_l,
            d_l=d_l,
            s_l=s_l,
            u_h=_as_tensor(None if high is None else np.repeat(high.u_h.data, n, axis=0)),
            d_h=_as_tensor(None if high is None else np.repeat(high.d_h.data, n, axis=0)),
            s_h=s_h_threads,
        )
        # (5) decode
        frames = wm.decode(imagined)
        # (6) posterior from the imagined observation, same d_l as the prior
        post_l = wm.posterior_low(d_l, wm.encode(frames))
        epistemic[tau] = float(np.mean(kl_categorical(post_l, prior_l).data))
        distance = np.sum((encoder.embed(frames.data) - goal_features[None]) ** 2, axis=-1)
        extrinsic[tau] = float(np.mean(distance))
        # each thread carries the recomputed posterior sample forward
        low = HierLatent(u_l=u_l, d_l=d_l, s_l=sample_st(post_l, rng, mode))

    epi, ext = float(epistemic.mean()), float(extrinsic.mean())
    executed = future[: execute_steps or len(future)]
    return EfeBreakdown(
        epistemic_steps=epistemic,
        extrinsic_steps=extrinsic,
        precision=precision_value,
        epistemic_weight=epistemic_weight,
        epistemic=epi,
        extrinsic=ext,
        total=efe_total(epi, ext, precision_value, epistemic_weight),
        mean_omega=float(np.mean(executed[:, 1])),
    )


def select_action(candidates: np.ndarray, breakdowns: list[EfeBreakdown]) -> tuple[int, np.ndarray]:
    """Index and sequence of the minimal total G; ties go to the lowest index."""
    if len(breakdowns) == 0 or len(candidates) == 0:
        raise ValueError("select_action needs at least one candidate")
    if len(candidates) != len(breakdowns):
        raise ValueError(f"{len(candidates)} candidates but {len(breakdowns)} breakdowns")
    index = int(np.argmin([b.total for b in breakdowns]))
    return index, candidates[index]


@dataclass
class EpisodeSpec:
    episode_id: str
    mode: PlannerMode
    facing: Facing
    start: Pose
    goal: Pose


@dataclass
class EpisodeLog:
    summary: EpisodeSummary
    records: list  # PlanningRecord | StepRecord in execution order

    def lines(self) -> list[str]:
        return [r.model_dump_json() for r in self.records] + [self.summary.model_dump_json()]


class PlannerService:
    """Closed-loop episodes: sample candidates, score them, execute the best chunk."""

    def __init__(self, simulator: Optional[SimulatorService] = None):
        self.simulator = simulator or get_simulator_service()

    def validate_goal(self, goal: Pose, world: WorldSpec) -> None:
        r = world.robot_radius
        if not (r <= goal.x <= world.width - r and r <= goal.y <= world.height - r):
            raise GoalSpecError(f"Goal ({goal.x:.2f}, {goal.y:.2f}) is outside the reachable arena")
        for lm in world.landmarks:
            if math.hypot(goal.x - lm.x, goal.y - lm.y) < lm.radius + r:
                raise GoalSpecError(f"Goal ({goal.x:.2f}, {goal.y:.2f}) overlaps a landmark")

    def run_episode(
        self,
        spec: EpisodeSpec,
        world: WorldSpec,
        policy: DiffusionPolicy,
        wm: MTRSSM,
        encoder: FeatureEncoder,
        planner: PlannerConfig,
        schedule: PrecisionSchedule,
        limits: EpisodeLimits,
        dt: float,
        ledger: SeedLedger,
        goal_obs: Optional[np.ndarray] = None,
    ) -> EpisodeLog:
        self.validate_goal(spec.goal, world)
        goal_obs = self.simulator.render(spec.goal, world) if goal_obs is None else goal_obs
        if tuple(goal_obs.shape) != tuple(wm.obs_shape):
            raise GoalSpecError(f"Goal observation shape {goal_obs.shape} does not match {tuple(wm.obs_shape)}")
        goal_features = encoder.embed(goal_obs)
        epistemic_weight = 0.0 if spec.mode == PlannerMode.ONLY_EXTRINSIC else 1.0
        execute = policy.config.execute_steps

        policy_rng = ledger.rng("policy")
        filter_rng = ledger.rng("filter")
        pose = spec.start
        obs_now = self.simulator.render(pose, world)
        obs_prev = obs_now
        latent = filter_sequence(
            wm, obs_now[None], np.zeros((1, 2), dtype=np.float32), filter_rng
        ).states[-1]

        records: list = []
        steps, collisions, n = 0, 0, 0
        success = goal_check(pose, spec.goal, limits.goal_radius, limits.heading_tol)
        while not success and steps < limits.max_steps:
            candidates = policy.sample_candidates(obs_prev, obs_now, policy_rng, planner.n_candidates)
            prec = precision(n, schedule)
            breakdowns = [
                efe_evaluate(
                    candidate,
                    latent,
                    goal_features,
                    wm,
                    encoder,
                    planner,
                    prec,
                    ledger.rng(f"efe/iter-{n:04d}/cand-{i:02d}"),
                    epistemic_weight,
                    execute,
                )
                for i, candidate in enumerate(candidates)
            ]
            chosen, sequence = select_action(candidates, breakdowns)
            records.append(
                PlanningRecord(
                    n=n, t=steps, precision=prec, candidates=[b.score() for b in breakdowns], chosen=chosen
                )
            )

            for v, omega in sequence[1 : 1 + execute]:
                action = Action(v=float(v), omega=float(omega))
                pose, collided = self.simulator.step(pose, action, dt, world)
                steps += 1
                collisions += int(collided)
                obs_prev, obs_now = obs_now, self.simulator.render(pose, world)
                latent = filter_sequence(
                    wm,
                    obs_now[None],
                    np.zeros((1, 2), dtype=np.float32),
                    filter_rng,
                    init_state=latent,
                    first_prev_action=np.array([action.as_tuple()], dtype=np.float32),
                ).states[-1]
                records.append(StepRecord(t=steps, pose=pose.as_tuple(), action=action.as_tuple(), collided=collided))
                success = goal_check(pose, spec.goal, limits.goal_radius, limits.heading_tol)
                if success or steps >= limits.max_steps:
                    break
            n += 1

        summary = EpisodeSummary(
            episode_id=spec.episode_id,
            mode=spec.mode,
            facing=spec.facing,
            start=spec.start.as_tuple(),
            goal=spec.goal.as_tuple(),
            success=success,
            steps=steps,
            collisions=collisions,
            seed=ledger.seed("episode"),
        )
        marker = "✅" if success else "❌"
        logger.info(
            f"{marker} Episode {spec.episode_id} ({spec.mode.value}, {spec.facing.value}): "
            f"{'success' if success else 'failure'} after {steps} steps, {collisions} collisions"
        )
        return EpisodeLog(summary, records)


# Global service instance
_planner_service: Optional[PlannerService] = None


def get_planner_service() -> PlannerService:
    """Get or create planner service instance."""
    global _planner_service
    if _planner_service is None:
        _planner_service = PlannerService()
    return _planner_service
