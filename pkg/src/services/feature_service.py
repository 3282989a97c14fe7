"""
Feature-encoder training: feature distances regress normalized spatial
distances over pose-labelled observation pairs, half of them near pairs.
"""

import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from ..diffcore import Graph, Tensor, ops
from ..diffcore.checkpoint import load_checkpoint, save_checkpoint
from ..diffcore.optim import AdamState, adam_step
from ..models.features import FeatureEncoder
from ..models.schemas import FeatureConfig, FeatureEvaluation, Pose, WorldSpec
from ..utils.geometry import spatial_distance_array
from ..utils.seed_ledger import SeedLedger
from .dataset_service import Dataset
from .simulator_service import SimulatorService, get_simulator_service

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8


class PairSampler:
    """Index pairs over flattened dataset steps: near pairs via a KD-tree, far pairs uniformly."""

    def __init__(self, poses: np.ndarray, near_radius: float):
        self.poses = poses.reshape(-1, 3)
        self.tree = cKDTree(self.poses[:, :2])
        self.near_radius = near_radius

    def sample(self, rng: np.random.Generator, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.poses)
        n_near = n_pairs // 2
        anchors = rng.integers(0, n, size=n_pairs)
        partners = rng.integers(0, n, size=n_pairs)
        neighbours = self.tree.query_ball_point(self.poses[anchors[:n_near], :2], self.near_radius)
        for i, candidates in enumerate(neighbours):
            partners[i] = candidates[int(rng.integers(0, len(candidates)))]
        return anchors, partners


def pair_loss(
    encoder: FeatureEncoder, images_a: np.ndarray, images_b: np.ndarray, targets: np.ndarray
) -> Tensor:
    """MSE between feature distances and target distances."""
    dtype = encoder.conv1.weight.dtype
    both = np.concatenate([images_a, images_b], axis=0)
    features = encoder(Tensor(both, dtype=dtype))
    n = len(images_a)
    diff = features[:n] - features[n:]
    distance = ops.sqrt(ops.sum(ops.square(diff), axis=-1) + NORM_EPS)
    return ops.mse(distance, Tensor(targets, dtype=dtype))


def feature_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)


class FeatureService:
    """Trains and evaluates the goal feature encoder."""

    def __init__(self, simulator: Optional[SimulatorService] = None):
        self.simulator = simulator or get_simulator_service()

    def train_features(
        self,
        dataset: Dataset,
        config: FeatureConfig,
        ledger: SeedLedger,
        encoder: Optional[FeatureEncoder] = None,
    ) -> tuple[FeatureEncoder, list[tuple[int, float]]]:
        if dataset.poses is None or dataset.poses.size == 0:
            raise ValueError("Feature training needs pose labels")
        encoder = encoder or FeatureEncoder(config, ledger.rng("features/init"), dataset.observations.shape[2:])
        images = dataset.observations.reshape((-1,) + dataset.observations.shape[2:])
        sampler = PairSampler(dataset.poses, config.near_radius)
        rng = ledger.rng("features/pairs")
        params = dict(encoder.named_parameters())
        state = AdamState(lr=config.lr)
        log: list[tuple[int, float]] = []
        running = []

        logger.info(f"Training feature encoder: {encoder.num_parameters()} parameters, {config.steps} steps")
        for step in range(1, config.steps + 1):
            a, b = sampler.sample(rng, config.batch_size)
            targets = (
                spatial_distance_array(sampler.poses[a], sampler.poses[b], config.heading_weight)
                / config.distance_scale
            )
            with Graph(params) as graph:
                loss = pair_loss(encoder, images[a], images[b], targets)
            adam_step(state, params, graph.backward(loss))
            running.append(loss.item())
            if step % config.log_every == 0 or step == config.steps:
                log.append((step, float(np.mean(running))))
                logger.info(f"Feature step {step}/{config.steps}: loss {log[-1][1]:.4f}")
                running = []

        logger.info("✅ Feature encoder training finished")
        return encoder, log

    def aliased_pairs(
        self, world: WorldSpec, rng: np.random.Generator, n_pairs: int = 16
    ) -> tuple[np.ndarray, np.ndarray]:
        """Renders of poses facing the south wall and their quarter-turn twins facing the east wall."""
        firsts, seconds = [], []
        for _ in range(n_pairs):
            pose = Pose(
                x=float(rng.uniform(2.5, world.width - 2.5)),
                y=float(rng.uniform(1.0, 2.5)),
                heading=-math.pi / 2 + float(rng.uniform(-0.3, 0.3)),
            )
            firsts.append(self.simulator.render(pose, world))
            seconds.append(self.simulator.render(self.simulator.aliased_twin(pose, world), world))
        return np.stack(firsts), np.stack(seconds)

    def evaluate_features(
        self,
        encoder: FeatureEncoder,
        dataset: Dataset,
        world: WorldSpec,
        config: FeatureConfig,
        rng: np.random.Generator,
        n_pairs: int = 1000,
    ) -> FeatureEvaluation:
        images = dataset.observations.reshape((-1,) + dataset.observations.shape[2:])
        poses = dataset.poses.reshape(-1, 3)
        a = rng.integers(0, len(poses), size=n_pairs)
        b = rng.integers(0, len(poses), size=n_pairs)
        feat_d = feature_distance(encoder.embed(images[a]), encoder.embed(images[b]))
        true_d = spatial_distance_array(poses[a], poses[b], config.heading_weight)
        rho = spearmanr(feat_d, true_d).statistic

        first, second = self.aliased_pairs(world, rng)
        aliased = feature_distance(encoder.embed(first), encoder.embed(second))
        result = FeatureEvaluation(
            spearman=float(rho),
            aliased_distance=float(np.mean(aliased)),
            median_distance=float(np.median(feat_d)),
            n_pairs=n_pairs,
        )
        logger.info(
            f"Feature evaluation: spearman {result.spearman:.3f}, aliased {result.aliased_distance:.3f} "
            f"vs median {result.median_distance:.3f}"
        )
        return result

    def save(self, encoder: FeatureEncoder, config: FeatureConfig, directory: Path) -> Path:
        metadata = {"config": config.model_dump(mode="json"), "obs_shape": list(encoder.obs_shape)}
        return save_checkpoint(directory, encoder.state_dict(), metadata)

    def load(self, directory: Path) -> tuple[FeatureEncoder, FeatureConfig]:
        arrays, metadata = load_checkpoint(directory)
        config = FeatureConfig.model_validate(metadata["config"])
        encoder = FeatureEncoder(config, np.random.default_rng(0), tuple(metadata["obs_shape"]))
        encoder.load_state_dict(arrays)
        return encoder, config


# Global service instance
_feature_service: Optional[FeatureService] = None


def get_feature_service() -> FeatureService:
    """Get or create feature service instance."""
    global _feature_service
    if _feature_service is None:
        _feature_service = FeatureService()
    return _feature_service
