import math

import numpy as np
import pytest

from src.models.denoiser import DenoiserNet
from src.models.schemas import OMEGA_MAX, V_MAX, ExperimentConfig, PolicyConfig, PolicyTrainConfig, ScheduleKind
from src.services.dataset_service import Dataset
from src.services.diffusion_service import (
    ActionStats,
    DiffusionPolicy,
    DiffusionService,
    ddim_denoise,
    ddim_timesteps,
    ddpm_step,
    make_schedule,
    noising,
)
from src.utils.seed_ledger import SeedLedger


def zero_predictor(noisy, steps, context):
    return np.zeros_like(noisy)


def constant_predictor(value):
    def predict(noisy, steps, context):
        return np.full_like(noisy, value)

    return predict


@pytest.mark.parametrize("kind", [ScheduleKind.COSINE, ScheduleKind.LINEAR])
def test_schedule_tables(kind):
    sched = make_schedule(200, kind)
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all(sched.betas[1:] > 0) and np.all(sched.betas[1:] < 1)
    np.testing.assert_allclose(sched.alpha_bars[1:], np.cumprod(sched.alphas[1:]))
    assert sched.sigmas[1] == 0.0
    assert np.all(sched.sigmas[2:] > 0)
    assert sched.alpha_bars[-1] < 0.5


def test_cosine_schedule_reaches_near_pure_noise():
    assert make_schedule(100, ScheduleKind.COSINE).alpha_bars[100] < 0.01
    assert make_schedule(1000, ScheduleKind.LINEAR).alpha_bars[1000] < 0.01


def test_schedule_needs_two_steps():
    with pytest.raises(ValueError, match="at least 2"):
        make_schedule(1)


def test_noising_identity(rng):
    sched = make_schedule(20)
    a0 = rng.standard_normal((4, 6, 2))
    eps = rng.standard_normal((4, 6, 2))
    steps = np.array([1, 5, 10, 20])
    noisy = noising(a0, steps, eps, sched)
    for i, k in enumerate(steps):
        abar = sched.alpha_bars[k]
        np.testing.assert_allclose(noisy[i], math.sqrt(abar) * a0[i] + math.sqrt(1 - abar) * eps[i])


def test_noising_variance_matches_schedule(rng):
    sched = make_schedule(20)
    eps = rng.standard_normal((20000,))
    noisy = noising(np.zeros(20000), 10, eps, sched)
    assert noisy.var() == pytest.approx(1 - sched.alpha_bars[10], rel=0.05)


def test_noising_inverts_given_the_noise(rng):
    sched = make_schedule(100)
    a0 = rng.standard_normal((3, 8, 2))
    eps = rng.standard_normal((3, 8, 2))
    for k in (1, 50, 100):
        a_k = noising(a0, k, eps, sched)
        abar = sched.alpha_bars[k]
        np.testing.assert_allclose((a_k - math.sqrt(1 - abar) * eps) / math.sqrt(abar), a0, atol=1e-6)


def test_noising_rejects_bad_inputs(rng):
    sched = make_schedule(20)
    with pytest.raises(ValueError, match="out of range"):
        noising(np.zeros(3), 0, np.zeros(3), sched)
    with pytest.raises(ValueError, match="out of range"):
        noising(np.zeros(3), 21, np.zeros(3), sched)
    with pytest.raises(ValueError, match="does not match"):
        noising(np.zeros(3), 1, np.zeros(4), sched)


def test_ddpm_step_matches_scalar_formula():
    sched = make_schedule(10)
    k = 6
    a_k = np.array([[[0.5, -1.0]]])
    out = ddpm_step(a_k, k, constant_predictor(0.3), None, sched, noise_scale=0.0)
    beta, alpha, abar = sched.betas[k], sched.alphas[k], sched.alpha_bars[k]
    expected = (a_k - beta / math.sqrt(1 - abar) * 0.3) / math.sqrt(alpha)
    np.testing.assert_allclose(out, expected, rtol=1e-10)


def test_ddpm_step_noise_handling(rng):
    sched = make_schedule(10)
    a_k = np.zeros((2, 4, 2))
    # Step 1 never adds noise.
    np.testing.assert_array_equal(ddpm_step(a_k, 1, zero_predictor, None, sched), a_k)
    with pytest.raises(ValueError, match="needs an rng"):
        ddpm_step(a_k, 5, zero_predictor, None, sched)
    noisy = ddpm_step(a_k, 5, zero_predictor, None, sched, rng=rng)
    assert np.std(noisy) > 0
    with pytest.raises(ValueError, match="out of range"):
        ddpm_step(a_k, 11, zero_predictor, None, sched)


def noise_coefficients(sched):
    """Per-step multipliers of the noise prediction in the DDIM (eta 0) and DDPM-mean updates."""
    k = np.arange(1, sched.K + 1)
    abar, abar_prev, alpha, beta = sched.alpha_bars[k], sched.alpha_bars[k - 1], sched.alphas[k], sched.betas[k]
    ddim = -np.sqrt(1 - abar) / np.sqrt(alpha) + np.sqrt(1 - abar_prev)
    ddpm = -beta / (np.sqrt(alpha) * np.sqrt(1 - abar))
    return ddim, ddpm


def test_ddim_full_steps_share_signal_path_with_ddpm_mean(rng):
    sched = make_schedule(12)
    x = rng.standard_normal((3, 5, 2))
    ddim = ddim_denoise(x.copy(), zero_predictor, None, sched, n_steps=12)
    ddpm = x.copy()
    for k in range(12, 0, -1):
        ddpm = ddpm_step(ddpm, k, zero_predictor, None, sched, noise_scale=0.0)
    np.testing.assert_allclose(ddim, ddpm, rtol=1e-8)


@pytest.mark.parametrize("kind", [ScheduleKind.COSINE, ScheduleKind.LINEAR])
def test_ddim_ddpm_gap_under_constant_noise_prediction(kind, rng):
    sched = make_schedule(12, kind)
    c = 0.3
    x = rng.standard_normal((3, 5, 2))
    ddim = ddim_denoise(x.copy(), constant_predictor(c), None, sched, n_steps=12)
    ddpm = x.copy()
    for k in range(12, 0, -1):
        ddpm = ddpm_step(ddpm, k, constant_predictor(c), None, sched, noise_scale=0.0)

    ddim_coef, ddpm_coef = noise_coefficients(sched)
    gap = 0.0
    for k in range(12, 0, -1):
        gap = gap / math.sqrt(sched.alphas[k]) + c * (ddim_coef[k - 1] - ddpm_coef[k - 1])
    np.testing.assert_allclose(ddim - ddpm, np.full_like(x, gap), rtol=1e-8, atol=1e-12)
    assert abs(gap) > 1e-3


@pytest.mark.parametrize("kind", [ScheduleKind.COSINE, ScheduleKind.LINEAR])
def test_ddim_noise_step_is_between_half_and_all_of_ddpm(kind):
    ddim_coef, ddpm_coef = noise_coefficients(make_schedule(100, kind))
    ratio = ddim_coef / ddpm_coef
    assert ratio[0] == pytest.approx(1.0)
    assert np.all(ratio > 0.5) and np.all(ratio <= 1.0 + 1e-12)
    if kind == ScheduleKind.LINEAR:
        assert np.all(ratio[9:] < 0.55)


def test_ddim_is_deterministic(rng):
    sched = make_schedule(12)
    x = rng.standard_normal((3, 5, 2))
    predict = constant_predictor(0.1)
    np.testing.assert_array_equal(
        ddim_denoise(x.copy(), predict, None, sched, 4), ddim_denoise(x.copy(), predict, None, sched, 4)
    )


def test_ddim_timesteps():
    assert ddim_timesteps(10, 5) == [10, 8, 6, 3, 1]
    assert ddim_timesteps(10, 1) == [10]
    assert ddim_timesteps(4, 4) == [4, 3, 2, 1]
    with pytest.raises(ValueError, match="must not exceed"):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)


def test_action_stats_round_trip_and_clamp():
    actions = np.array([[0.1, -0.5], [0.2, 0.5], [0.3, 0.0]], dtype=np.float32)
    stats = ActionStats.from_actions(actions)
    np.testing.assert_allclose(stats.denormalize(stats.normalize(actions)), actions, atol=1e-6)
    clamped = stats.denormalize(np.array([[100.0, -100.0], [-100.0, 100.0]]))
    assert clamped[0, 0] == pytest.approx(V_MAX)
    assert clamped[0, 1] == pytest.approx(-OMEGA_MAX)
    assert clamped[1, 0] == pytest.approx(0.0)
    assert clamped[1, 1] == pytest.approx(OMEGA_MAX)


def test_action_stats_constant_dimension():
    stats = ActionStats.from_actions(np.zeros((5, 2), dtype=np.float32))
    assert np.all(stats.std >= 1e-6)
    restored = ActionStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(restored.mean, stats.mean)


def test_policy_config_validation():
    with pytest.raises(ValueError, match="execute_steps"):
        PolicyConfig(horizon=4, execute_steps=5, segment_len=8)
    with pytest.raises(ValueError, match="sample_steps"):
        PolicyConfig(diffusion_steps=5, sample_steps=6)
    with pytest.raises(ValueError, match="segment_len"):
        PolicyConfig(horizon=16, segment_len=10)


def test_full_scale_preset():
    config = ExperimentConfig.full_scale(seed=3)
    assert config.seed == 3
    assert (config.policy.horizon, config.policy.execute_steps) == (64, 32)
    assert (config.policy.diffusion_steps, config.policy.sample_steps) == (100, 10)
    assert config.policy.segment_len == 128


def test_full_scale_keeps_policy_overrides():
    config = ExperimentConfig.full_scale(policy=PolicyConfig(n_candidates=16, sample_steps=5))
    assert (config.policy.n_candidates, config.policy.sample_steps) == (16, 5)
    assert (config.policy.horizon, config.policy.segment_len) == (64, 128)

    config = ExperimentConfig.full_scale(policy={"execute_steps": 16})
    assert (config.policy.horizon, config.policy.execute_steps) == (64, 16)


@pytest.fixture
def small_policy(small_policy_config, small_world, rng):
    net = DenoiserNet(small_policy_config, rng, obs_shape=(3, small_world.image_height, small_world.n_rays))
    stats = ActionStats(np.array([0.15, 0.0]), np.array([0.1, 0.5]))
    return DiffusionPolicy(small_policy_config, net, stats)


def test_untrained_denoiser_predicts_zero(small_policy, small_world, rng):
    context = rng.random((2, 2, 3, small_world.image_height, small_world.n_rays)).astype(np.float32)
    noisy = rng.standard_normal((2, 8, 2)).astype(np.float32)
    out = small_policy.net.predict(noisy, np.array([1, 5]), context)
    assert out.shape == noisy.shape
    np.testing.assert_array_equal(out, 0.0)


def test_sample_candidates_shape_and_limits(small_policy, small_world, rng):
    obs = rng.random((3, small_world.image_height, small_world.n_rays)).astype(np.float32)
    candidates = small_policy.sample_candidates(obs, obs, rng)
    assert candidates.shape == (3, small_policy.config.horizon + 2, 2)
    assert np.all(candidates[..., 0] >= 0) and np.all(candidates[..., 0] <= V_MAX + 1e-6)
    assert np.all(np.abs(candidates[..., 1]) <= OMEGA_MAX + 1e-6)
    assert small_policy.sample_candidates(obs, obs, rng, n_candidates=5).shape[0] == 5


def test_sample_candidates_reproducible(small_policy, small_world):
    obs = np.full((3, small_world.image_height, small_world.n_rays), 0.5, dtype=np.float32)
    a = small_policy.sample_candidates(obs, obs, np.random.default_rng(4))
    b = small_policy.sample_candidates(obs, obs, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_policy_save_load(tmp_path, small_policy, rng):
    small_policy.net.out_conv.weight.data = rng.standard_normal(small_policy.net.out_conv.weight.shape).astype(
        np.float32
    )
    small_policy.save(tmp_path / "policy")
    loaded = DiffusionPolicy.load(tmp_path / "policy")
    assert loaded.config == small_policy.config
    for name, value in small_policy.net.state_dict().items():
        np.testing.assert_array_equal(loaded.net.state_dict()[name], value)
    np.testing.assert_allclose(loaded.stats.std, small_policy.stats.std)


def test_training_windows_stay_inside_sequences(small_dataset, small_policy_config):
    windows = DiffusionService().training_windows(small_dataset, small_policy_config)
    span = small_policy_config.sequence_length
    assert windows
    assert len(windows) == len(set(windows))
    for _, t in windows:
        assert t >= 1
        assert t - 1 + span <= small_dataset.seq_len


def test_make_batch_alignment(small_dataset, small_policy_config, rng):
    service = DiffusionService()
    windows = [(1, 3)]
    stats = ActionStats(np.zeros(2), np.ones(2))
    context, actions = service.make_batch(small_dataset, windows, stats, small_policy_config, rng, 1)
    np.testing.assert_array_equal(context[0, 0], small_dataset.observations[1, 2])
    np.testing.assert_array_equal(context[0, 1], small_dataset.observations[1, 3])
    np.testing.assert_allclose(actions[0, 0], small_dataset.actions[1, 2])


def test_short_training(small_dataset, small_policy_config):
    policy, log = DiffusionService().train(
        small_dataset, small_policy_config, PolicyTrainConfig(steps=2, batch_size=2, log_every=1), SeedLedger(0)
    )
    assert [step for step, _ in log] == [1, 2]
    assert all(np.isfinite(loss) for _, loss in log)
    assert policy.net.obs_shape == small_dataset.observations.shape[2:]


@pytest.mark.slow
def test_training_reduces_loss(small_dataset, small_policy_config):
    _, log = DiffusionService().train(
        small_dataset, small_policy_config, PolicyTrainConfig(steps=200, batch_size=8, lr=1e-3, log_every=50),
        SeedLedger(0),
    )
    assert log[-1][1] < log[0][1]


@pytest.fixture(scope="module")
def two_mode_policy():
    """Policy trained on constant views where half the sequences turn left and half turn right."""
    n, steps = 8, 20
    actions = np.zeros((n, steps, 2), dtype=np.float32)
    actions[..., 0] = 0.2
    actions[: n // 2, :, 1] = 0.8
    actions[n // 2 :, :, 1] = -0.8
    dataset = Dataset(
        observations=np.full((n, steps, 3, 8, 16), 0.5, dtype=np.float32),
        actions=actions,
        poses=np.zeros((n, steps, 3), dtype=np.float32),
        dt=0.2,
    )
    config = PolicyConfig(
        horizon=6, execute_steps=3, diffusion_steps=20, sample_steps=10, n_candidates=16, base_channels=8,
        step_embed_dim=16, keypoints=4, segment_len=10, segment_stride=5,
    )
    policy, _ = DiffusionService().train(
        dataset, config, PolicyTrainConfig(steps=600, batch_size=16, lr=1e-3, log_every=100), SeedLedger(0)
    )
    return policy, dataset.observations[0, 0]


@pytest.mark.slow
def test_both_turning_modes_are_sampled(two_mode_policy):
    policy, view = two_mode_policy
    candidates = policy.sample_candidates(view, view, np.random.default_rng(1), n_candidates=200)
    mean_omega = candidates[..., 1].mean(axis=1)
    assert np.mean(mean_omega > 0) >= 0.2
    assert np.mean(mean_omega < 0) >= 0.2


@pytest.mark.slow
def test_candidates_are_diverse(two_mode_policy):
    policy, view = two_mode_policy
    candidates = policy.sample_candidates(view, view, np.random.default_rng(2))
    assert candidates.shape[0] == 16
    assert np.std(candidates[..., 1].mean(axis=1)) > 0.1 * OMEGA_MAX
