"""
Scripted data collection and the on-disk dataset layout.

Layout::

    manifest.json        DatasetManifest
    obs_NNN.f32          T x 3 x 24 x 32
    act_NNN.f32          T x 2   (a_t, issued after observing o_t)
    pose_NNN.f32         T x 3   (pose at which o_t was rendered)
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..models.schemas import (
    ACTION_DIM,
    OMEGA_MAX,
    V_MAX,
    Action,
    DatasetConfig,
    DatasetManifest,
    Pose,
    WorldSpec,
    wrap_angle,
)
from ..utils.blob_io import read_f32, read_json, write_f32, write_json
from ..utils.seed_ledger import SeedLedger
from .simulator_service import SimulatorService, get_simulator_service

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PROBE_OFFSETS = np.array([0.0, 0.5, -0.5])
COVERAGE_CELLS = 8
TARGET_CHOICES = 3  # pick among the nearest unvisited cells
TARGET_PATIENCE = 150  # steps before an unreached target is dropped


class DatasetError(Exception):
    """Raised for missing or inconsistent datasets and worlds without free space."""

    pass


@dataclass
class Dataset:
    """Equal-length sequences of (observation, action, pose)."""

    observations: np.ndarray  # (S, T, 3, H, W)
    actions: np.ndarray  # (S, T, 2)
    poses: np.ndarray  # (S, T, 3)
    dt: float
    manifest: Optional[DatasetManifest] = None

    @property
    def n_sequences(self) -> int:
        return int(self.actions.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.actions.shape[1])

    @property
    def n_steps(self) -> int:
        return self.n_sequences * self.seq_len

    def subset(self, indices: list[int]) -> "Dataset":
        return Dataset(
            observations=self.observations[indices],
            actions=self.actions[indices],
            poses=self.poses[indices],
            dt=self.dt,
            manifest=self.manifest,
        )

    def split(self, held_out: int = 1) -> tuple["Dataset", "Dataset"]:
        """Last ``held_out`` sequences form the evaluation split."""
        if not 0 < held_out < self.n_sequences:
            raise DatasetError(
                f"Cannot hold out {held_out} of {self.n_sequences} sequences"
            )
        cut = self.n_sequences - held_out
        return self.subset(list(range(cut))), self.subset(list(range(cut, self.n_sequences)))


def segment_starts(length: int, window: int, stride: int) -> list[int]:
    """Start indices of overlapping windows; the last window ends at ``length`` at most."""
    if window <= 0 or stride <= 0:
        raise ValueError(f"window and stride must be positive, got {window}, {stride}")
    if length < window:
        return []
    return list(range(0, length - window + 1, stride))


def coverage(poses: np.ndarray, world: WorldSpec, cells: int = COVERAGE_CELLS) -> float:
    """Fraction of a ``cells`` x ``cells`` occupancy grid visited by the (T, 3) poses."""
    ix = np.clip((poses[:, 0] / world.width * cells).astype(int), 0, cells - 1)
    iy = np.clip((poses[:, 1] / world.height * cells).astype(int), 0, cells - 1)
    visited = np.zeros((cells, cells), dtype=bool)
    visited[iy, ix] = True
    return float(visited.mean())


class DatasetService:
    """Scripted wanderer policy plus dataset persistence."""

    def __init__(self, simulator: Optional[SimulatorService] = None):
        self.simulator = simulator or get_simulator_service()

    # ------------------------------------------------------------------
    # Collection

    def random_free_pose(self, world: WorldSpec, rng: np.random.Generator, tries: int = 1000) -> Pose:
        r = world.robot_radius
        for _ in range(tries):
            x = rng.uniform(r, world.width - r)
            y = rng.uniform(r, world.height - r)
            if all(math.hypot(x - lm.x, y - lm.y) > lm.radius + r for lm in world.landmarks):
                return Pose(x=x, y=y, heading=rng.uniform(-math.pi, math.pi))
        raise DatasetError("No free start pose found: world has no free space")

    def visit(self, pose: Pose, world: WorldSpec, state: dict) -> np.ndarray:
        """Mark the pose's cell in the wanderer's occupancy grid and return the grid."""
        visited = state.setdefault("visited", np.zeros((COVERAGE_CELLS, COVERAGE_CELLS), dtype=bool))
        ix = min(max(int(pose.x / world.width * COVERAGE_CELLS), 0), COVERAGE_CELLS - 1)
        iy = min(max(int(pose.y / world.height * COVERAGE_CELLS), 0), COVERAGE_CELLS - 1)
        visited[iy, ix] = True
        return visited

    def pick_target(
        self, pose: Pose, world: WorldSpec, visited: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, int]:
        """One of the nearest unvisited cells (any cell once the grid is full), as (iy, ix)."""
        cells = np.argwhere(~visited)
        if len(cells) == 0:
            cells = np.argwhere(visited)
        cw, ch = world.width / COVERAGE_CELLS, world.height / COVERAGE_CELLS
        centers = np.stack([(cells[:, 1] + 0.5) * cw, (cells[:, 0] + 0.5) * ch], axis=1)
        dist = np.hypot(centers[:, 0] - pose.x, centers[:, 1] - pose.y)
        nearest = np.argsort(dist)[:TARGET_CHOICES]
        iy, ix = cells[int(rng.choice(nearest))]
        return int(iy), int(ix)

    def wanderer_action(
        self, pose: Pose, world: WorldSpec, rng: np.random.Generator, state: dict
    ) -> Action:
        """Forward bias toward a nearby unvisited cell, range-triggered turns away from
        obstacles, occasional random turns."""
        visited = self.visit(pose, world, state)
        if state.get("turn_steps", 0) > 0:
            state["turn_steps"] -= 1
            return Action(v=0.05, omega=state["turn_omega"])

        front, left, right = self.simulator.probe_distances(pose, PROBE_OFFSETS, world)
        if front < 0.6 or min(left, right) < 0.25:
            state["turn_omega"] = OMEGA_MAX if left >= right else -OMEGA_MAX
            state["turn_steps"] = int(rng.integers(4, 12))
            return Action(v=0.0, omega=state["turn_omega"])

        if rng.random() < 0.02:
            state["turn_omega"] = float(rng.uniform(-OMEGA_MAX, OMEGA_MAX))
            state["turn_steps"] = int(rng.integers(3, 15))
            return Action(v=0.05, omega=state["turn_omega"])

        target = state.get("target")
        state["target_age"] = state.get("target_age", 0) + 1
        if target is None or visited[target] or state["target_age"] > TARGET_PATIENCE:
            target = state["target"] = self.pick_target(pose, world, visited, rng)
            state["target_age"] = 0
        iy, ix = target
        tx = (ix + 0.5) * world.width / COVERAGE_CELLS
        ty = (iy + 0.5) * world.height / COVERAGE_CELLS
        error = wrap_angle(math.atan2(ty - pose.y, tx - pose.x) - pose.heading)
        omega = float(np.clip(1.5 * error + rng.normal(0.0, 0.1), -OMEGA_MAX, OMEGA_MAX))
        speed = float(rng.uniform(0.7, 1.0)) * V_MAX * max(0.15, math.cos(error))
        return Action(v=speed, omega=omega)

    def collect_sequence(
        self, world: WorldSpec, seq_len: int, dt: float, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        obs = np.empty((seq_len,) + (3, world.image_height, world.n_rays), dtype=np.float32)
        actions = np.empty((seq_len, ACTION_DIM), dtype=np.float32)
        poses = np.empty((seq_len, 3), dtype=np.float32)

        pose = self.random_free_pose(world, rng)
        state: dict = {}
        for t in range(seq_len):
            obs[t] = self.simulator.render(pose, world, rng=rng)
            action = self.wanderer_action(pose, world, rng, state)
            actions[t] = action.as_tuple()
            poses[t] = pose.as_tuple()
            pose, _ = self.simulator.step(pose, action, dt, world)
        return obs, actions, poses

    def wanderer_collect(
        self,
        world: WorldSpec,
        config: DatasetConfig,
        ledger: SeedLedger,
    ) -> Dataset:
        if config.n_sequences < 1:
            raise ValueError("n_sequences must be at least 1")
        if world.width <= 2 * world.robot_radius or world.height <= 2 * world.robot_radius:
            raise DatasetError(
                f"World {world.width}x{world.height} leaves no free space for radius {world.robot_radius}"
            )

        obs, acts, poses = [], [], []
        for i in range(config.n_sequences):
            rng = ledger.rng(f"collect/seq-{i:03d}")
            o, a, p = self.collect_sequence(world, config.seq_len, config.dt, rng)
            obs.append(o)
            acts.append(a)
            poses.append(p)
            logger.info(
                f"Collected sequence {i + 1}/{config.n_sequences} "
                f"(coverage {coverage(p, world):.0%})"
            )

        manifest = DatasetManifest(
            dt=config.dt,
            seq_len=config.seq_len,
            n_sequences=config.n_sequences,
            obs_shape=[3, world.image_height, world.n_rays],
            action_dim=ACTION_DIM,
            seed=ledger.root_seed,
            world_hash=world.world_hash(),
        )
        return Dataset(np.stack(obs), np.stack(acts), np.stack(poses), config.dt, manifest)

    # ------------------------------------------------------------------
    # Persistence

    def save(self, dataset: Dataset, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if dataset.manifest is None:
            raise DatasetError("Dataset has no manifest to persist")
        for i in range(dataset.n_sequences):
            write_f32(directory / f"obs_{i:03d}.f32", dataset.observations[i])
            write_f32(directory / f"act_{i:03d}.f32", dataset.actions[i])
            write_f32(directory / f"pose_{i:03d}.f32", dataset.poses[i])
        write_json(directory / MANIFEST_NAME, dataset.manifest.model_dump(mode="json"))
        logger.info(f"✅ Dataset written: {directory} ({dataset.n_steps} steps)")
        return directory

    def load(self, directory: Path) -> Dataset:
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise DatasetError(f"Dataset manifest not found: {manifest_path}")
        manifest = DatasetManifest.model_validate(read_json(manifest_path))
        if manifest.dt <= 0:
            raise DatasetError(f"Invalid dt {manifest.dt} in {manifest_path}")

        obs_shape = (manifest.seq_len, *manifest.obs_shape)
        obs, acts, poses = [], [], []
        try:
            for i in range(manifest.n_sequences):
                obs.append(read_f32(directory / f"obs_{i:03d}.f32", obs_shape))
                acts.append(read_f32(directory / f"act_{i:03d}.f32", (manifest.seq_len, manifest.action_dim)))
                poses.append(read_f32(directory / f"pose_{i:03d}.f32", (manifest.seq_len, 3)))
        except FileNotFoundError as exc:
            raise DatasetError(str(exc)) from exc
        except ValueError as exc:
            raise DatasetError(f"Inconsistent dataset {directory}: {exc}") from exc

        return Dataset(np.stack(obs), np.stack(acts), np.stack(poses), manifest.dt, manifest)


# Global service instance
_dataset_service: Optional[DatasetService] = None


def get_dataset_service() -> DatasetService:
    """Get or create dataset service instance."""
    global _dataset_service
    if _dataset_service is None:
        _dataset_service = DatasetService()
    return _dataset_service
