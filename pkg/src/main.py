"""Command-line interface: data collection, training, imagination, evaluation and reporting."""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .config import get_settings
from .diffcore.checkpoint import CheckpointError
from .models.mtrssm import rssm_variant
from .models.schemas import ExperimentConfig, PlannerMode
from .services.dataset_service import DatasetError, get_dataset_service
from .services.diffusion_service import get_diffusion_service
from .services.experiment_service import get_experiment_service, load_models
from .services.feature_service import get_feature_service
from .services.report_service import (
    contact_sheet,
    get_report_service,
    read_episode_logs,
    write_csv,
    write_ppm,
)
from .services.world_model_service import (
    LOSS_COMPONENTS,
    filter_sequence,
    get_world_model_service,
    imagine,
    load_world_model,
    reconstruction_mse,
    rotation_loop_closure,
    save_world_model,
)
from .utils.blob_io import write_f32, write_json
from .utils.seed_ledger import SeedLedger

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3

COMMANDS = ("collect", "train-wm", "train-policy", "train-features", "imagine", "eval", "report", "replay", "schema")
LOOP_CLOSURE_OMEGA = 0.8  # rad/s for the in-place turn in the imagine summary


def configure_logging(verbose: bool = False) -> None:
    settings = get_settings()
    logging.basicConfig(
        level=settings.resolved_log_level(verbose),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    settings = get_settings()
    path = args.config or settings.default_config
    if path:
        with open(path, "r", encoding="utf-8") as f:
            config = ExperimentConfig.model_validate(json.load(f))
    else:
        config = ExperimentConfig(seed=settings.default_seed, out_dir=settings.default_out_dir)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    return config.model_copy(update=updates) if updates else config


def selected_modes(args: argparse.Namespace, config: ExperimentConfig) -> list[PlannerMode]:
    return [PlannerMode.parse(args.mode)] if args.mode else list(config.modes)


def run_ledger(config: ExperimentConfig, command: str) -> tuple[SeedLedger, Path]:
    return SeedLedger(config.seed), Path(config.out_dir) / "ledgers" / f"{command}.json"


def load_dataset(config: ExperimentConfig):
    return get_dataset_service().load(Path(config.dataset_dir()))


def split_dataset(dataset):
    if dataset.n_sequences > 1:
        return dataset.split(held_out=1)
    logger.warning("⚠️ Single-sequence dataset: evaluating on the training sequence")
    return dataset, dataset


# ----------------------------------------------------------------------
# Commands


def cmd_collect(args: argparse.Namespace, config: ExperimentConfig) -> None:
    ledger, ledger_path = run_ledger(config, "collect")
    service = get_dataset_service()
    dataset = service.wanderer_collect(config.world, config.dataset, ledger)
    service.save(dataset, Path(config.dataset_dir()))
    ledger.save(ledger_path)


def cmd_train_wm(args: argparse.Namespace, config: ExperimentConfig) -> None:
    ledger, ledger_path = run_ledger(config, "train-wm")
    train, held_out = split_dataset(load_dataset(config))
    service = get_world_model_service()
    modes = selected_modes(args, config)
    variants = []
    if PlannerMode.FULL in modes or PlannerMode.ONLY_EXTRINSIC in modes:
        variants.append(("mtrssm", config.world_model, None))
    if PlannerMode.RSSM in modes:
        single = config.world_model.single_level()
        shape = train.observations.shape[2:]
        variants.append(("rssm", single, rssm_variant(config.world_model, ledger.rng("rssm/init"), shape)))

    for name, wm_config, initial in variants:
        model, log = service.tbptt_train(train, wm_config, config.wm_train, ledger, initial)
        directory = Path(config.checkpoint_dir(name))
        save_world_model(model, directory)
        columns = ["epoch", "batch", "window", "grad_norm", "total", *LOSS_COMPONENTS]
        write_csv(directory / "loss.csv", columns, ([entry.get(c) for c in columns] for entry in log))
        mse = reconstruction_mse(
            model, held_out.observations[0], held_out.actions[0], ledger.rng(f"{name}/held-out")
        )
        logger.info(f"{name} held-out reconstruction MSE: {mse:.5f} per pixel")
    ledger.save(ledger_path)


def cmd_train_policy(args: argparse.Namespace, config: ExperimentConfig) -> None:
    ledger, ledger_path = run_ledger(config, "train-policy")
    dataset = load_dataset(config)
    policy, log = get_diffusion_service().train(dataset, config.policy, config.policy_train, ledger)
    directory = Path(config.checkpoint_dir("policy"))
    policy.save(directory)
    write_csv(directory / "loss.csv", ["step", "loss"], log)
    ledger.save(ledger_path)


def cmd_train_features(args: argparse.Namespace, config: ExperimentConfig) -> None:
    ledger, ledger_path = run_ledger(config, "train-features")
    train, held_out = split_dataset(load_dataset(config))
    service = get_feature_service()
    encoder, log = service.train_features(train, config.features, ledger)
    directory = Path(config.checkpoint_dir("features"))
    service.save(encoder, config.features, directory)
    write_csv(directory / "loss.csv", ["step", "loss"], log)
    evaluation = service.evaluate_features(
        encoder, held_out, config.world, config.features, ledger.rng("features/eval")
    )
    write_json(directory / "evaluation.json", evaluation.model_dump(mode="json"))
    ledger.save(ledger_path)


def cmd_imagine(args: argparse.Namespace, config: ExperimentConfig) -> None:
    """Warm up on a held-out sequence, then imagine open-loop under the recorded actions."""
    ledger, ledger_path = run_ledger(config, "imagine")
    _, held_out = split_dataset(load_dataset(config))
    modes = selected_modes(args, config)
    name = "rssm" if modes == [PlannerMode.RSSM] else "mtrssm"
    model = load_world_model(Path(config.checkpoint_dir(name)))

    obs, actions = held_out.observations[0], held_out.actions[0]
    warmup = min(config.imagine_warmup, len(obs) - 1)
    horizon = min(config.imagine_horizon, len(obs) - warmup)
    rng = ledger.rng(f"imagine/{name}")
    closed = filter_sequence(model, obs[:warmup], actions[:warmup], rng, decode=True)
    opened = imagine(model, closed.states[-1], actions[warmup - 1 : warmup - 1 + horizon], horizon, rng)

    truth = obs[warmup : warmup + horizon]
    predicted = opened.predictions[0]
    per_step = np.mean((predicted - truth) ** 2, axis=(1, 2, 3))
    baseline = reconstruction_mse(model, obs, actions, rng)
    first_last, first_mid = rotation_loop_closure(model, closed.states[-1], LOOP_CLOSURE_OMEGA, held_out.dt, rng)

    out = Path(config.out_dir) / "imagine" / name
    write_f32(out / "warmup.f32", closed.predictions[0])
    write_f32(out / "imagined.f32", predicted)
    write_f32(out / "truth.f32", truth)
    columns = get_settings().contact_sheet_columns
    write_ppm(out / "warmup.ppm", contact_sheet(closed.predictions[0], columns))
    write_ppm(out / "imagined.ppm", contact_sheet(predicted, columns))
    write_ppm(out / "truth.ppm", contact_sheet(truth, columns))
    write_csv(out / "mse.csv", ["step", "open_loop_mse"], ([i + 1, float(v)] for i, v in enumerate(per_step)))
    write_json(
        out / "summary.json",
        {
            "warmup": warmup,
            "horizon": horizon,
            "open_loop_mse": float(per_step.mean()),
            "closed_loop_mse": baseline,
            "loop_closure": {"first_last_mse": first_last, "first_half_turn_mse": first_mid},
        },
    )
    logger.info(f"✅ Imagination: open-loop MSE {per_step.mean():.5f} vs closed-loop {baseline:.5f}")
    ledger.save(ledger_path)


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig) -> None:
    modes = selected_modes(args, config)
    workers = args.workers or get_settings().default_workers
    models = load_models(config, modes)
    summaries = asyncio.run(get_experiment_service().run_grid(config, models, modes, workers))
    successes = sum(s.success for s in summaries)
    logger.info(f"✅ {successes}/{len(summaries)} episodes reached the goal")


def cmd_report(args: argparse.Namespace, config: ExperimentConfig) -> None:
    traces = read_episode_logs(Path(config.episodes_dir()))
    service = get_report_service()
    out = Path(config.report_dir())
    modes = [PlannerMode.parse(args.mode)] if args.mode else None
    service.write_report(traces, out, modes)

    wm_dir = Path(config.checkpoint_dir("mtrssm"))
    feature_dir = Path(config.checkpoint_dir("features"))
    if not (wm_dir.exists() and feature_dir.exists()):
        logger.warning("⚠️ Skipping state-dynamics export: world model or feature checkpoint missing")
        return
    ledger, ledger_path = run_ledger(config, "report")
    encoder, _ = get_feature_service().load(feature_dir)
    service.export_state_dynamics(
        load_world_model(wm_dir), encoder, load_dataset(config), config.world, ledger.rng("report/states"), out
    )
    ledger.save(ledger_path)


def cmd_replay(args: argparse.Namespace, config: ExperimentConfig) -> None:
    """Re-run one evaluated episode from its seed ledger and compare it with the stored log."""
    episode_id = args.episode
    mode = PlannerMode.parse(episode_id.split("-", 1)[0])
    models = load_models(config, [mode])
    episodes = Path(config.episodes_dir())
    log = get_experiment_service().replay(episode_id, config, models, episodes / "ledger.json")
    original = episodes / mode.value / f"{episode_id}.jsonl"
    replayed = "\n".join(log.lines()) + "\n"
    if original.exists():
        identical = original.read_text(encoding="utf-8") == replayed
        marker = "✅" if identical else "❌"
        logger.info(f"{marker} Replay of {episode_id} {'matches' if identical else 'differs from'} {original}")
        if not identical:
            raise ValueError(f"Replayed episode {episode_id} differs from {original}")
    target = Path(config.out_dir) / "replay" / f"{episode_id}.jsonl"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(replayed, encoding="utf-8")


def cmd_schema(args: argparse.Namespace, config: Optional[ExperimentConfig]) -> None:
    print(json.dumps(ExperimentConfig.model_json_schema(), indent=2))


HANDLERS = {
    "collect": cmd_collect,
    "train-wm": cmd_train_wm,
    "train-policy": cmd_train_policy,
    "train-features": cmd_train_features,
    "imagine": cmd_imagine,
    "eval": cmd_eval,
    "report": cmd_report,
    "replay": cmd_replay,
    "schema": cmd_schema,
}


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="aif-nav", description=f"{settings.app_name} v{settings.app_version}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ExperimentConfig JSON file")
    common.add_argument("--seed", type=int, help="Root seed (overrides the config)")
    common.add_argument("--out", help="Output directory (overrides the config)")
    common.add_argument(
        "--mode", choices=["full", "rssm", "only-extrinsic"], help="Restrict to one planner mode"
    )
    common.add_argument("--workers", type=int, help="Concurrent evaluation episodes")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        command = sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or "").strip() or None)
        if name == "replay":
            command.add_argument("episode", help="Episode id, e.g. full-s0-wall-g1-t0")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = None if args.command == "schema" else load_config(args)
        HANDLERS[args.command](args, config)
    except ValidationError as e:
        for error in e.errors():
            field = ".".join(str(part) for part in error["loc"]) or "<root>"
            print(f"{field}: {error['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as e:
        print(f"<root>: invalid JSON ({e})", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CheckpointError, DatasetError) as e:
        logger.error(f"❌ {e}")
        return EXIT_MISSING
    except (ValueError, RuntimeError) as e:
        logger.error(f"❌ {e}")
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
