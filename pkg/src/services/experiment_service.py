"""Evaluation grid orchestration: concurrent episodes with JSON-lines logs."""

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import aiofiles

from ..models.features import FeatureEncoder
from ..models.mtrssm import MTRSSM
from ..models.schemas import EpisodeSummary, ExperimentConfig, PlannerMode
from ..utils.seed_ledger import SeedLedger
from .diffusion_service import DiffusionPolicy
from .feature_service import get_feature_service
from .planner_service import EpisodeLog, EpisodeSpec, PlannerService, get_planner_service
from .world_model_service import load_world_model

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.json"


@dataclass
class TrainedModels:
    policy: DiffusionPolicy
    mtrssm: MTRSSM
    features: FeatureEncoder
    rssm: Optional[MTRSSM] = None

    def world_model(self, mode: PlannerMode) -> MTRSSM:
        if mode == PlannerMode.RSSM:
            if self.rssm is None:
                raise FileNotFoundError("RSSM checkpoint required for mode 'rssm' was not loaded")
            return self.rssm
        return self.mtrssm


def load_models(config: ExperimentConfig, modes: list[PlannerMode]) -> TrainedModels:
    """Load every checkpoint the requested modes need; missing ones raise FileNotFoundError."""
    policy = DiffusionPolicy.load(Path(config.checkpoint_dir("policy")))
    mtrssm = load_world_model(Path(config.checkpoint_dir("mtrssm")))
    features, _ = get_feature_service().load(Path(config.checkpoint_dir("features")))
    rssm = None
    if PlannerMode.RSSM in modes:
        rssm = load_world_model(Path(config.checkpoint_dir("rssm")))
    return TrainedModels(policy=policy, mtrssm=mtrssm, features=features, rssm=rssm)


def build_grid(config: ExperimentConfig, modes: list[PlannerMode]) -> list[EpisodeSpec]:
    """starts x facings x goals x trials per mode, in a stable order."""
    specs = []
    for mode in modes:
        for si, start in enumerate(config.grid.starts):
            for facing in config.grid.facings:
                for gi, goal in enumerate(config.grid.goals):
                    for trial in range(config.grid.trials):
                        specs.append(
                            EpisodeSpec(
                                episode_id=f"{mode.value}-s{si}-{facing.value}-g{gi}-t{trial}",
                                mode=mode,
                                facing=facing,
                                start=start.pose(facing),
                                goal=goal,
                            )
                        )
    return specs


class ExperimentService:
    """Runs the evaluation grid with a bounded number of concurrent episodes."""

    def __init__(self, planner: Optional[PlannerService] = None):
        self.planner = planner or get_planner_service()

    def run_one(
        self, spec: EpisodeSpec, config: ExperimentConfig, models: TrainedModels, ledger: SeedLedger
    ) -> EpisodeLog:
        planner_config = config.planner.model_copy(update={"mode": spec.mode})
        return self.planner.run_episode(
            spec,
            config.world,
            models.policy,
            models.world_model(spec.mode),
            models.features,
            planner_config,
            config.precision,
            config.limits,
            config.dataset.dt,
            ledger.child(f"eval/{spec.episode_id}"),
        )

    async def write_episode_log(self, path: Path, log: EpisodeLog) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(path, "w", encoding="utf-8") as f:
            await f.write("\n".join(log.lines()) + "\n")

    async def run_grid(
        self,
        config: ExperimentConfig,
        models: TrainedModels,
        modes: list[PlannerMode],
        workers: int,
        ledger: Optional[SeedLedger] = None,
        out_dir: Optional[Path] = None,
    ) -> list[EpisodeSummary]:
        """Run every episode of the grid; logs land in ``<out_dir>/<mode>/<episode_id>.jsonl``."""
        if workers < 1:
            raise ValueError(f"workers must be at least 1, got {workers}")
        ledger = ledger or SeedLedger(config.seed)
        out_dir = Path(out_dir or config.episodes_dir())
        specs = build_grid(config, modes)
        semaphore = asyncio.Semaphore(workers)
        summaries: dict[str, EpisodeSummary] = {}
        errors: list[str] = []

        logger.info(f"Evaluating {len(specs)} episodes over modes {[m.value for m in modes]} with {workers} workers")

        async def run_with_semaphore(spec: EpisodeSpec) -> None:
            async with semaphore:
                try:
                    log = await asyncio.to_thread(self.run_one, spec, config, models, ledger)
                except Exception as e:
                    logger.error(f"❌ Episode {spec.episode_id} failed: {e}")
                    errors.append(f"{spec.episode_id}: {e}")
                    return
                await self.write_episode_log(out_dir / spec.mode.value / f"{spec.episode_id}.jsonl", log)
                summaries[spec.episode_id] = log.summary

        await asyncio.gather(*(run_with_semaphore(spec) for spec in specs))

        ledger.save(out_dir / LEDGER_NAME)
        if errors:
            raise RuntimeError(f"{len(errors)} episodes failed; first: {errors[0]}")
        logger.info(f"✅ Evaluation finished: {len(summaries)} episode logs in {out_dir}")
        return [summaries[spec.episode_id] for spec in specs]

    def replay(
        self,
        episode_id: str,
        config: ExperimentConfig,
        models: TrainedModels,
        ledger_path: Path,
    ) -> EpisodeLog:
        """Re-run one episode from the recorded seed ledger."""
        ledger = SeedLedger.load(ledger_path)
        if ledger.root_seed != config.seed:
            raise ValueError(f"Ledger root seed {ledger.root_seed} does not match config seed {config.seed}")
        stale = ledger.verify()
        if stale:
            raise ValueError(f"Ledger entries no longer derive from the root seed: {stale[:3]}")
        modes = [PlannerMode.parse(episode_id.split("-", 1)[0])]
        for spec in build_grid(config, modes):
            if spec.episode_id == episode_id:
                return self.run_one(spec, config, models, ledger)
        raise ValueError(f"Episode {episode_id} is not part of the configured grid")


# Global service instance
_experiment_service: Optional[ExperimentService] = None


def get_experiment_service() -> ExperimentService:
    """Get or create experiment service instance."""
    global _experiment_service
    if _experiment_service is None:
        _experiment_service = ExperimentService()
    return _experiment_service
