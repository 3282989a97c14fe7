"""
Reductions over episode logs and model states: results table, EFE traces,
candidate diversity, PCA projections and image contact sheets.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import TypeAdapter

from ..models.features import FeatureEncoder
from ..models.mtrssm import MTRSSM
from ..models.schemas import (
    EpisodeRecord,
    EpisodeSummary,
    Facing,
    PlannerMode,
    PlanningRecord,
    Pose,
    ResultsRow,
    WorldSpec,
)
from .dataset_service import Dataset
from .simulator_service import SimulatorService, get_simulator_service
from .world_model_service import filter_sequence

logger = logging.getLogger(__name__)

RESULTS_COLUMNS = [
    "mode",
    "overall",
    "exp",
    "noexp",
    "collisions_overall",
    "collisions_exp",
    "collisions_noexp",
    "n_overall",
    "n_exp",
    "n_noexp",
]

_record_adapter = TypeAdapter(EpisodeRecord)


@dataclass
class EpisodeTrace:
    summary: EpisodeSummary
    plans: list[PlanningRecord]


@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray  # (k, D), k <= 3
    explained: np.ndarray  # fraction of total variance per component
    projected: np.ndarray  # (N, k)


def parse_episode_lines(lines: Iterable[str]) -> EpisodeTrace:
    summary = None
    plans = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        record = _record_adapter.validate_python(json.loads(line))
        if isinstance(record, PlanningRecord):
            plans.append(record)
        elif isinstance(record, EpisodeSummary):
            summary = record
    if summary is None:
        raise ValueError("Episode log has no summary line")
    return EpisodeTrace(summary=summary, plans=plans)


def read_episode_logs(directory: Path) -> list[EpisodeTrace]:
    """All ``*.jsonl`` episode logs under ``directory``, sorted by episode id."""
    directory = Path(directory)
    if not directory.exists():
        raise FileNotFoundError(f"Episode directory not found: {directory}")
    traces = []
    for path in sorted(directory.rglob("*.jsonl")):
        with open(path, "r", encoding="utf-8") as f:
            try:
                traces.append(parse_episode_lines(f))
            except ValueError as e:
                logger.warning(f"⚠️ Skipping {path}: {e}")
    traces.sort(key=lambda t: t.summary.episode_id)
    logger.info(f"Read {len(traces)} episode logs from {directory}")
    return traces


def _rate(episodes: list[EpisodeSummary]) -> Optional[float]:
    if not episodes:
        return None
    return 100.0 * sum(e.success for e in episodes) / len(episodes)


def _collisions(episodes: list[EpisodeSummary]) -> Optional[float]:
    if not episodes:
        return None
    return float(np.mean([e.collisions for e in episodes]))


def build_results_table(
    summaries: Sequence[EpisodeSummary], modes: Optional[Sequence[PlannerMode]] = None
) -> list[ResultsRow]:
    """Per-mode success rates split by facing; empty categories stay None."""
    modes = list(modes) if modes is not None else list(dict.fromkeys(s.mode for s in summaries))
    rows = []
    for mode in modes:
        episodes = [s for s in summaries if s.mode == mode]
        exp = [s for s in episodes if s.facing == Facing.WALL]
        noexp = [s for s in episodes if s.facing == Facing.INTERIOR]
        rows.append(
            ResultsRow(
                mode=mode,
                overall=_rate(episodes),
                exp=_rate(exp),
                noexp=_rate(noexp),
                collisions_overall=_collisions(episodes),
                collisions_exp=_collisions(exp),
                collisions_noexp=_collisions(noexp),
                n_overall=len(episodes),
                n_exp=len(exp),
                n_noexp=len(noexp),
            )
        )
    return rows


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    logger.info(f"Wrote {path}")
    return path


def write_results_csv(rows: Sequence[ResultsRow], path: Path) -> Path:
    return write_csv(
        path,
        RESULTS_COLUMNS,
        ([getattr(r, c).value if c == "mode" else getattr(r, c) for c in RESULTS_COLUMNS] for r in rows),
    )


def efe_trace_rows(traces: Sequence[EpisodeTrace]) -> list[list]:
    """One row per planning iteration with the chosen candidate's terms."""
    rows = []
    for trace in traces:
        for plan in trace.plans:
            chosen = plan.candidates[plan.chosen]
            rows.append(
                [
                    trace.summary.episode_id,
                    trace.summary.mode.value,
                    trace.summary.facing.value,
                    plan.n,
                    plan.t,
                    plan.precision,
                    plan.chosen,
                    chosen.epistemic,
                    chosen.extrinsic,
                    chosen.total,
                ]
            )
    return rows


def candidate_diversity_rows(traces: Sequence[EpisodeTrace]) -> list[list]:
    """Spread of the candidates' mean angular velocity at each planning iteration."""
    rows = []
    for trace in traces:
        for plan in trace.plans:
            omegas = np.array([c.mean_omega for c in plan.candidates])
            rows.append(
                [
                    trace.summary.episode_id,
                    trace.summary.mode.value,
                    plan.n,
                    len(omegas),
                    float(omegas.std()),
                    float(omegas.min()),
                    float(omegas.max()),
                ]
            )
    return rows


def pca_export(data: np.ndarray, n_components: int = 3) -> PcaResult:
    """Project centred ``data`` (N, D) onto its top principal axes."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] < 3:
        raise ValueError(f"PCA needs at least 3 samples of at least 3 dimensions, got {data.shape}")
    mean = data.mean(axis=0)
    centred = data - mean
    cov = centred.T @ centred / (len(data) - 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    values = np.clip(values[order], 0.0, None)
    vectors = vectors[:, order]
    total = values.sum()
    rank = int(np.sum(values > total * 1e-10)) if total > 0 else 0
    k = min(n_components, rank)
    if k < n_components:
        logger.warning(f"⚠️ PCA input has rank {rank}; emitting {k} components")
    components = vectors[:, :k].T
    explained = values[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(mean=mean, components=components, explained=explained, projected=centred @ components.T)


def write_pca_csv(result: PcaResult, path: Path, labels: Optional[Sequence] = None) -> Path:
    k = result.projected.shape[1]
    header = ["index"] + (["label"] if labels is not None else []) + [f"pc{i + 1}" for i in range(k)]
    rows = []
    for i, coords in enumerate(result.projected):
        prefix = [i] + ([labels[i]] if labels is not None else [])
        rows.append(prefix + [float(c) for c in coords])
    return write_csv(path, header, rows)


def _path_diameter(points: np.ndarray) -> float:
    diffs = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diffs**2).sum(-1)).max())


def slow_manifold_summary(d_h: np.ndarray, d_l: np.ndarray) -> dict[str, float]:
    """Per-step displacement of both levels in their PCA spaces and closure of the slow loop."""
    proj_h = pca_export(d_h).projected
    proj_l = pca_export(d_l).projected
    step_h = float(np.linalg.norm(np.diff(proj_h, axis=0), axis=-1).mean())
    step_l = float(np.linalg.norm(np.diff(proj_l, axis=0), axis=-1).mean())
    diameter = _path_diameter(proj_h)
    gap = float(np.linalg.norm(proj_h[-1] - proj_h[0]))
    return {
        "step_displacement_high": step_h,
        "step_displacement_low": step_l,
        "high_gap": gap,
        "high_diameter": diameter,
        "high_gap_ratio": gap / diameter if diameter > 0 else 0.0,
    }


def contact_sheet(frames: np.ndarray, columns: int, pad: int = 1) -> np.ndarray:
    """Tile (N, 3, H, W) frames in [0, 1] into one (3, rows*(H+pad), columns*(W+pad)) image."""
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"Contact sheet expects (N, 3, H, W) frames, got {frames.shape}")
    if columns < 1:
        raise ValueError("columns must be at least 1")
    n, c, h, w = frames.shape
    rows = max(1, -(-n // columns))
    sheet = np.ones((c, rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.float32)
    for i, frame in enumerate(frames):
        r, col = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        sheet[:, y : y + h, x : x + w] = frame
    return sheet


def write_ppm(path: Path, image: np.ndarray) -> Path:
    """Binary PPM (P6) of a (3, H, W) image in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


class ReportService:
    """Writes the report directory from episode logs."""

    def write_report(
        self, traces: Sequence[EpisodeTrace], out_dir: Path, modes: Optional[Sequence[PlannerMode]] = None
    ) -> list[ResultsRow]:
        out_dir = Path(out_dir)
        rows = build_results_table([t.summary for t in traces], modes)
        write_results_csv(rows, out_dir / "results.csv")
        write_csv(
            out_dir / "efe_traces.csv",
            ["episode_id", "mode", "facing", "n", "t", "precision", "chosen", "epistemic", "extrinsic", "total"],
            efe_trace_rows(traces),
        )
        write_csv(
            out_dir / "candidate_diversity.csv",
            ["episode_id", "mode", "n", "n_candidates", "omega_std", "omega_min", "omega_max"],
            candidate_diversity_rows(traces),
        )
        for row in rows:
            overall = "-" if row.overall is None else f"{row.overall:.1f}%"
            exp = "-" if row.exp is None else f"{row.exp:.1f}%"
            noexp = "-" if row.noexp is None else f"{row.noexp:.1f}%"
            logger.info(f"{row.mode.value}: overall {overall}, Exp {exp}, NoExp {noexp} ({row.n_overall} episodes)")
        logger.info(f"✅ Report written to {out_dir}")
        return rows

    def export_state_dynamics(
        self,
        wm: MTRSSM,
        encoder: FeatureEncoder,
        dataset: Dataset,
        world: WorldSpec,
        rng: np.random.Generator,
        out_dir: Path,
        max_steps: int = 500,
        simulator: Optional[SimulatorService] = None,
    ) -> dict[str, float]:
        """PCA projections of d_h, d_l and image features over training data plus a scripted lap."""
        simulator = simulator or get_simulator_service()
        out_dir = Path(out_dir)
        loop_poses, loop_actions = simulator.loop_poses(world, dataset.dt)
        loop_obs = np.stack(
            [simulator.render(Pose(x=float(x), y=float(y), heading=float(h)), world) for x, y, h in loop_poses]
        )

        steps = min(max_steps, dataset.seq_len)
        data_obs, data_actions = dataset.observations[0, :steps], dataset.actions[0, :steps]
        data_run = filter_sequence(wm, data_obs, data_actions, rng)
        loop_run = filter_sequence(wm, loop_obs, loop_actions, rng)
        labels = ["data"] * steps + ["loop"] * len(loop_obs)

        families = {
            "d_l": (data_run.stack("d_l")[0], loop_run.stack("d_l")[0]),
            "features": (encoder.embed(data_obs), encoder.embed(loop_obs)),
        }
        if wm.hierarchical:
            families["d_h"] = (data_run.stack("d_h")[0], loop_run.stack("d_h")[0])
        explained_rows = []
        for name, (data, loop) in families.items():
            result = pca_export(np.concatenate([data, loop], axis=0))
            write_pca_csv(result, out_dir / f"pca_{name}.csv", labels)
            explained_rows.append([name] + [float(v) for v in result.explained])
        write_csv(out_dir / "pca_explained.csv", ["family", "pc1", "pc2", "pc3"], explained_rows)

        summary: dict[str, float] = {}
        if wm.hierarchical:
            summary = slow_manifold_summary(families["d_h"][1], families["d_l"][1])
            write_csv(out_dir / "slow_manifold.csv", list(summary), [list(summary.values())])
            logger.info(
                f"Loop dynamics: step displacement d_h {summary['step_displacement_high']:.4f} "
                f"vs d_l {summary['step_displacement_low']:.4f}, d_h gap ratio {summary['high_gap_ratio']:.3f}"
            )
        return summary


# Global service instance
_report_service: Optional[ReportService] = None


def get_report_service() -> ReportService:
    """Get or create report service instance."""
    global _report_service
    if _report_service is None:
        _report_service = ReportService()
    return _report_service
