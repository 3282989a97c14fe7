import math

import numpy as np
import pytest

from src.models.schemas import (
    EpisodeLimits,
    Facing,
    PlannerConfig,
    PlannerMode,
    PlanningRecord,
    Pose,
    PrecisionSchedule,
    SampleMode,
    StepRecord,
)
from src.services.planner_service import (
    EfeBreakdown,
    EpisodeSpec,
    GoalSpecError,
    PlannerService,
    efe_evaluate,
    efe_total,
    precision,
    select_action,
)
from src.services.world_model_service import filter_sequence
from src.utils.seed_ledger import SeedLedger

GOAL = Pose(x=2.0, y=2.8, heading=math.pi / 2)


def breakdown(total: float) -> EfeBreakdown:
    return EfeBreakdown(
        epistemic_steps=np.zeros(1),
        extrinsic_steps=np.zeros(1),
        precision=1.0,
        epistemic_weight=1.0,
        epistemic=0.0,
        extrinsic=total,
        total=total,
        mean_omega=0.0,
    )


def test_precision_schedule_values():
    assert precision(10) == pytest.approx(1.54)
    assert precision(0) == pytest.approx(0.08 + 2.92 / (1 + math.exp(6)))
    assert precision(-100) == pytest.approx(0.08, abs=1e-6)
    assert precision(30) == pytest.approx(3.0, abs=1e-4)
    assert precision(-5000) == 0.08


def test_precision_is_monotonic_and_bounded():
    values = [precision(n) for n in range(-20, 40)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert all(0.08 <= v <= 3.0 for v in values)


def test_precision_custom_schedule():
    schedule = PrecisionSchedule(floor=0.0, ceiling=1.0, slope=1.0, midpoint=0.0)
    assert precision(0, schedule) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="ceiling"):
        PrecisionSchedule(floor=2.0, ceiling=1.0)


def test_efe_total_combines_terms():
    assert efe_total(2.0, 3.0, 0.5) == pytest.approx(-0.5)
    assert efe_total(2.0, 3.0, 0.5, epistemic_weight=0.0) == pytest.approx(1.5)


def test_higher_epistemic_value_lowers_efe():
    assert efe_total(1.0, 1.0, 1.0) < efe_total(0.5, 1.0, 1.0)
    assert efe_total(0.0, 1.0, 1.0) < efe_total(0.0, 2.0, 1.0)


def test_select_action_breaks_ties_to_lowest_index():
    candidates = np.arange(12, dtype=np.float32).reshape(3, 2, 2)
    index, sequence = select_action(candidates, [breakdown(1.0), breakdown(0.5), breakdown(0.5)])
    assert index == 1
    np.testing.assert_array_equal(sequence, candidates[1])


def test_select_action_validation():
    with pytest.raises(ValueError, match="at least one"):
        select_action(np.zeros((0, 2, 2)), [])
    with pytest.raises(ValueError, match="breakdowns"):
        select_action(np.zeros((2, 2, 2)), [breakdown(0.0)])


@pytest.fixture
def filtered(small_models, simulator, small_world):
    obs = simulator.render(Pose(x=2.0, y=1.0, heading=math.pi / 2), small_world)
    return filter_sequence(small_models.mtrssm, obs[None], np.zeros((1, 2), dtype=np.float32), None).states[-1]


@pytest.fixture
def goal_features(small_models, simulator, small_world):
    return small_models.features.embed(simulator.render(GOAL, small_world))


def candidate(length=8):
    return np.tile(np.array([[0.2, 0.1]], dtype=np.float32), (length, 1))


def test_efe_evaluate_argmax_is_deterministic(small_models, filtered, goal_features):
    config = PlannerConfig(m_samples=2, n_samples=2, horizon=3, sample_mode=SampleMode.ARGMAX)
    args = (candidate(), filtered, goal_features, small_models.mtrssm, small_models.features, config, 1.5, None)
    first = efe_evaluate(*args)
    second = efe_evaluate(*args)
    assert first.total == second.total
    assert first.epistemic_steps.shape == (3,)
    assert first.epistemic >= -1e-6
    assert first.extrinsic >= 0
    assert first.total == pytest.approx(-first.epistemic + 1.5 * first.extrinsic)
    assert first.mean_omega == pytest.approx(0.1)


def test_efe_evaluate_only_extrinsic(small_models, filtered, goal_features):
    config = PlannerConfig(m_samples=2, n_samples=2, horizon=2)
    result = efe_evaluate(
        candidate(), filtered, goal_features, small_models.mtrssm, small_models.features, config, 2.0,
        np.random.default_rng(0), epistemic_weight=0.0,
    )
    assert result.total == pytest.approx(2.0 * result.extrinsic)
    assert result.epistemic_weight == 0.0


def test_efe_evaluate_single_level(small_models, simulator, small_world, goal_features):
    obs = simulator.render(Pose(x=2.0, y=1.0, heading=math.pi / 2), small_world)
    latent = filter_sequence(small_models.rssm, obs[None], np.zeros((1, 2), dtype=np.float32), None).states[-1]
    config = PlannerConfig(m_samples=2, n_samples=2, horizon=2)
    result = efe_evaluate(
        candidate(), latent, goal_features, small_models.rssm, small_models.features, config, 1.0,
        np.random.default_rng(0),
    )
    assert np.isfinite(result.total)


def test_efe_evaluate_rejects_bad_inputs(small_models, filtered, goal_features):
    config = PlannerConfig(m_samples=1, n_samples=1)
    with pytest.raises(ValueError, match="Candidate"):
        efe_evaluate(candidate()[0], filtered, goal_features, small_models.mtrssm, small_models.features, config, 1.0, None)
    with pytest.raises(ValueError, match="single filtered latent"):
        efe_evaluate(
            candidate(), filtered.repeat(2), goal_features, small_models.mtrssm, small_models.features, config, 1.0, None
        )
    with pytest.raises(ValueError, match="single filtered latent"):
        efe_evaluate(candidate(), filtered, goal_features, small_models.rssm, small_models.features, config, 1.0, None)


def test_validate_goal(small_world):
    service = PlannerService()
    service.validate_goal(GOAL, small_world)
    with pytest.raises(GoalSpecError, match="outside"):
        service.validate_goal(Pose(x=5.0, y=1.0), small_world)
    landmark = small_world.landmarks[0]
    with pytest.raises(GoalSpecError, match="landmark"):
        service.validate_goal(Pose(x=landmark.x, y=landmark.y), small_world)


def test_goal_observation_must_match_world_model(small_models, small_world):
    spec = EpisodeSpec("full-shape", PlannerMode.FULL, Facing.WALL, Pose(x=2.0, y=1.0), GOAL)
    with pytest.raises(GoalSpecError, match="shape"):
        PlannerService().run_episode(
            spec, small_world, small_models.policy, small_models.mtrssm, small_models.features, PlannerConfig(),
            PrecisionSchedule(), EpisodeLimits(), 0.2, SeedLedger(0), goal_obs=np.zeros((3, 4, 4)),
        )


def run(small_models, small_world, spec, limits, planner=None):
    return PlannerService().run_episode(
        spec,
        small_world,
        small_models.policy,
        small_models.world_model(spec.mode),
        small_models.features,
        planner or PlannerConfig(m_samples=2, n_samples=2, n_candidates=2, horizon=2, mode=spec.mode),
        PrecisionSchedule(),
        limits,
        0.2,
        SeedLedger(5).child(f"eval/{spec.episode_id}"),
    )


def test_episode_starting_at_goal_succeeds_immediately(small_models, small_world):
    spec = EpisodeSpec("full-at-goal", PlannerMode.FULL, Facing.INTERIOR, GOAL, GOAL)
    log = run(small_models, small_world, spec, EpisodeLimits(max_steps=10))
    assert log.summary.success
    assert log.summary.steps == 0
    assert log.records == []


def test_episode_with_zero_step_budget(small_models, small_world):
    start = Pose(x=2.0, y=1.0, heading=-math.pi / 2)
    spec = EpisodeSpec("full-budget", PlannerMode.FULL, Facing.WALL, start, GOAL)
    log = run(small_models, small_world, spec, EpisodeLimits(max_steps=0))
    assert not log.summary.success
    assert log.summary.steps == 0


def test_episode_records_and_budget(small_models, small_world):
    start = Pose(x=2.0, y=1.0, heading=-math.pi / 2)
    spec = EpisodeSpec("full-short", PlannerMode.FULL, Facing.WALL, start, GOAL)
    log = run(small_models, small_world, spec, EpisodeLimits(max_steps=4, goal_radius=0.3))
    plans = [r for r in log.records if isinstance(r, PlanningRecord)]
    steps = [r for r in log.records if isinstance(r, StepRecord)]
    assert log.summary.steps == len(steps) <= 4
    assert log.summary.collisions == sum(r.collided for r in steps)
    assert [p.n for p in plans] == list(range(len(plans)))
    assert all(len(p.candidates) == 2 and 0 <= p.chosen < 2 for p in plans)
    assert [s.t for s in steps] == list(range(1, len(steps) + 1))
    lines = log.lines()
    assert '"kind":"summary"' in lines[-1]


def test_episode_is_reproducible(small_models, small_world):
    start = Pose(x=2.0, y=1.0, heading=-math.pi / 2)
    spec = EpisodeSpec("only_extrinsic-rep", PlannerMode.ONLY_EXTRINSIC, Facing.WALL, start, GOAL)
    limits = EpisodeLimits(max_steps=3, goal_radius=0.3)
    assert run(small_models, small_world, spec, limits).lines() == run(small_models, small_world, spec, limits).lines()


def test_episode_rejects_bad_goal(small_models, small_world):
    spec = EpisodeSpec("full-bad", PlannerMode.FULL, Facing.WALL, Pose(x=2.0, y=1.0), Pose(x=9.0, y=9.0))
    with pytest.raises(GoalSpecError):
        run(small_models, small_world, spec, EpisodeLimits(max_steps=2))


def test_select_action_is_invariant_to_positive_scaling():
    candidates = np.zeros((3, 2, 2), dtype=np.float32)
    totals = [2.0, -1.0, 0.5]
    index, _ = select_action(candidates, [breakdown(t) for t in totals])
    scaled, _ = select_action(candidates, [breakdown(3.7 * t) for t in totals])
    assert index == scaled == 1


def turning_candidates():
    omegas = [-0.8, 0.0, 0.4, 0.9]
    return [np.tile(np.array([[0.2, w]], dtype=np.float32), (6, 1)) for w in omegas]


def test_zero_precision_picks_most_informative_candidate(small_models, filtered, goal_features):
    config = PlannerConfig(m_samples=1, n_samples=1, horizon=3, sample_mode=SampleMode.ARGMAX)
    sequences = turning_candidates()
    results = [
        efe_evaluate(seq, filtered, goal_features, small_models.mtrssm, small_models.features, config, 0.0, None)
        for seq in sequences
    ]
    index, _ = select_action(np.stack(sequences), results)
    assert index == int(np.argmax([r.epistemic for r in results]))


def test_only_extrinsic_picks_closest_prediction(small_models, filtered, goal_features):
    config = PlannerConfig(m_samples=1, n_samples=1, horizon=3, sample_mode=SampleMode.ARGMAX)
    sequences = turning_candidates()
    results = [
        efe_evaluate(
            seq, filtered, goal_features, small_models.mtrssm, small_models.features, config, 1.54, None,
            epistemic_weight=0.0,
        )
        for seq in sequences
    ]
    index, _ = select_action(np.stack(sequences), results)
    assert index == int(np.argmin([r.extrinsic for r in results]))


def flatten_decoder(wm):
    """Every decoded pixel becomes sigmoid(0) = 0.5."""
    wm.decoder.up2.weight.data = np.zeros_like(wm.decoder.up2.weight.data)
    wm.decoder.up2.bias.data = np.zeros_like(wm.decoder.up2.bias.data)
    return np.full(wm.obs_shape, 0.5, dtype=np.float32)


def test_constant_decoder_gives_constant_extrinsic(small_models, filtered, goal_features):
    gray = flatten_decoder(small_models.mtrssm)
    expected = float(np.sum((small_models.features.embed(gray) - goal_features) ** 2))
    config = PlannerConfig(m_samples=1, n_samples=1, horizon=5, sample_mode=SampleMode.ARGMAX)
    result = efe_evaluate(
        candidate(), filtered, goal_features, small_models.mtrssm, small_models.features, config, 1.0, None
    )
    np.testing.assert_allclose(result.extrinsic_steps, np.full(5, expected), rtol=1e-5)


def test_goal_equal_to_prediction_leaves_only_epistemic(small_models, filtered):
    gray = flatten_decoder(small_models.mtrssm)
    goal = small_models.features.embed(gray)
    config = PlannerConfig(m_samples=2, n_samples=2, horizon=3)
    result = efe_evaluate(
        candidate(), filtered, goal, small_models.mtrssm, small_models.features, config, 1.5,
        np.random.default_rng(4),
    )
    assert result.extrinsic == pytest.approx(0.0, abs=1e-8)
    assert result.total == pytest.approx(-result.epistemic, abs=1e-6)


@pytest.mark.slow
def test_efe_spread_shrinks_with_more_samples(small_models, filtered, goal_features):
    def totals(m):
        config = PlannerConfig(m_samples=m, n_samples=m, horizon=4)
        return [
            efe_evaluate(
                candidate(), filtered, goal_features, small_models.mtrssm, small_models.features, config, 1.0,
                np.random.default_rng(seed),
            ).total
            for seed in range(60)
        ]

    # Shared slow samples put the ratio between 2 (slow noise only) and 4 (independent threads).
    ratio = np.std(totals(5)) / np.std(totals(20))
    assert 1.5 < ratio < 5.5
