"""Shared fixtures: a small arena, small model configs and a short wanderer dataset."""

import math

import numpy as np
import pytest

from src.models.schemas import (
    DatasetConfig,
    EpisodeLimits,
    EvalGrid,
    ExperimentConfig,
    Facing,
    FeatureConfig,
    PlannerConfig,
    PlannerMode,
    PolicyConfig,
    PolicyTrainConfig,
    Pose,
    StartCase,
    WmConfig,
    WmTrainConfig,
    WorldSpec,
)
from src.services.dataset_service import DatasetService
from src.services.simulator_service import SimulatorService
from src.utils.seed_ledger import SeedLedger


@pytest.fixture
def world() -> WorldSpec:
    """Default 8x8 arena at 32x24 resolution."""
    return WorldSpec()


@pytest.fixture
def small_world() -> WorldSpec:
    """4x4 arena at 16x8 resolution (height and width divisible by 4)."""
    return WorldSpec(width=4.0, height=4.0, n_rays=16, image_height=8)


@pytest.fixture
def simulator() -> SimulatorService:
    return SimulatorService()


@pytest.fixture
def small_policy_config() -> PolicyConfig:
    return PolicyConfig(
        horizon=6,
        execute_steps=3,
        diffusion_steps=10,
        sample_steps=5,
        n_candidates=3,
        base_channels=4,
        step_embed_dim=8,
        keypoints=4,
        segment_len=10,
        segment_stride=5,
    )


@pytest.fixture
def small_wm_config() -> WmConfig:
    return WmConfig(
        tau_h=8.0,
        tau_l=2.0,
        d_h=6,
        d_l=8,
        s_h_vars=2,
        s_h_classes=3,
        s_l_vars=2,
        s_l_classes=3,
        embed_dim=8,
        hidden=8,
        window=5,
        decoder_channels=4,
        decoder_res_blocks=1,
        encoder_channels=(4, 4, 4),
    )


@pytest.fixture
def small_feature_config() -> FeatureConfig:
    return FeatureConfig(feature_dim=4, hidden=8, steps=4, batch_size=4, log_every=2)


@pytest.fixture
def small_dataset(small_world):
    ledger = SeedLedger(11)
    return DatasetService().wanderer_collect(small_world, DatasetConfig(n_sequences=2, seq_len=24), ledger)


@pytest.fixture
def small_experiment(tmp_path, small_world, small_policy_config, small_wm_config, small_feature_config):
    """Evaluation config with one start, both facings, one goal and short episodes."""
    return ExperimentConfig(
        name="small",
        seed=3,
        out_dir=str(tmp_path / "run"),
        world=small_world,
        dataset=DatasetConfig(n_sequences=2, seq_len=24),
        policy=small_policy_config,
        policy_train=PolicyTrainConfig(steps=2, batch_size=2, log_every=1),
        world_model=small_wm_config,
        wm_train=WmTrainConfig(epochs=1, batch_size=2, segment_len=12, segment_stride=12, subseq_len=10),
        features=small_feature_config,
        planner=PlannerConfig(m_samples=2, n_samples=2, n_candidates=2, horizon=2),
        limits=EpisodeLimits(max_steps=4, goal_radius=0.3),
        grid=EvalGrid(
            starts=[StartCase(x=2.0, y=1.0, interior_heading=math.pi / 2, wall_heading=-math.pi / 2)],
            facings=[Facing.INTERIOR, Facing.WALL],
            goals=[Pose(x=2.0, y=2.8, heading=math.pi / 2)],
            trials=1,
        ),
        modes=[PlannerMode.FULL, PlannerMode.ONLY_EXTRINSIC],
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_models(small_world, small_policy_config, small_wm_config, small_feature_config):
    """Untrained policy, world models and encoder sized for ``small_world``."""
    from src.models.denoiser import DenoiserNet
    from src.models.features import FeatureEncoder
    from src.models.mtrssm import MTRSSM, rssm_variant
    from src.services.diffusion_service import ActionStats, DiffusionPolicy
    from src.services.experiment_service import TrainedModels

    obs_shape = (3, small_world.image_height, small_world.n_rays)
    ledger = SeedLedger(21)
    policy = DiffusionPolicy(
        small_policy_config,
        DenoiserNet(small_policy_config, ledger.rng("policy/init"), obs_shape),
        ActionStats(np.array([0.2, 0.0]), np.array([0.05, 0.3])),
    )
    return TrainedModels(
        policy=policy,
        mtrssm=MTRSSM(small_wm_config, ledger.rng("mtrssm/init"), obs_shape),
        features=FeatureEncoder(small_feature_config, ledger.rng("features/init"), obs_shape),
        rssm=rssm_variant(small_wm_config, ledger.rng("rssm/init"), obs_shape),
    )
