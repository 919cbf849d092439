"""
Command-line entry point.

Commands: evolve, eval, memory inspect|export, simulate, fixture.
Machine-readable output goes to stdout; logs go to stderr.
Exit codes: 0 success, 1 runtime abort, 2 configuration or validation error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from mistake_notebook.config import RunConfig, load_run_config, parse_override_args
from mistake_notebook.errors import (
    ConfigError,
    DuplicateId,
    MalformedLine,
    NotebookError,
    RegimeError,
)
from mistake_notebook.evolution import EvolutionSettings, evaluate, run_evolution
from mistake_notebook.fixtures import write_arithmetic_fixture
from mistake_notebook.gateway import ModelGateway
from mistake_notebook.logger_config import PACKAGE_LOGGER, get_logger, setup_logging
from mistake_notebook.memory import MemoryStore, count_tokens
from mistake_notebook.prompts import SECTION_TITLES
from mistake_notebook.schemas import AdditiveRewardModel, EvolutionReport, SimConfig
from mistake_notebook.simlab import run_simulation, summarize, write_sweep_csv
from mistake_notebook.tasks import ExactMatchGrader, JudgeGrader, build_grader, load_tasks, require_gold

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_CONFIG = 2

VALIDATION_ERRORS = (ConfigError, RegimeError, DuplicateId, MalformedLine)


def format_summary(accepted: int, batches: int, memory_size: int, avg_tokens: float, accuracy: float) -> str:
    return f"accepted={accepted}/{batches} mem={memory_size} len={avg_tokens:.1f} acc={accuracy:.4f}"


def final_accuracy(reports: Sequence[EvolutionReport]) -> float:
    """Accuracy of the last epoch under the committed memory of each batch."""
    if not reports:
        return 0.0
    last_epoch = max(report.epoch for report in reports)
    rewards = []
    for report in reports:
        if report.epoch != last_epoch:
            continue
        rewards.extend(report.regenerated_rewards if report.accepted else report.baseline_rewards)
    graded = [reward for reward in rewards if reward is not None]
    return sum(graded) / len(graded) if graded else 0.0


# ============================================
# Commands
# ============================================

def _load_config(args: argparse.Namespace, extra: Sequence[str]) -> RunConfig:
    overrides = parse_override_args(extra)
    if args.seed is not None:
        overrides["generation.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["evolution.epochs"] = args.epochs
    if getattr(args, "ledger", None):
        overrides["ledger_path"] = str(Path(args.ledger).resolve())
    if getattr(args, "memory", None):
        overrides["memory_path"] = str(Path(args.memory).resolve())
    config = load_run_config(args.config, overrides)
    if args.log_level is None:
        logging.getLogger(PACKAGE_LOGGER).setLevel(config.log_level)
    return config


def cmd_evolve(args: argparse.Namespace, extra: Sequence[str]) -> int:
    config = _load_config(args, extra)
    if config.dataset_path is None:
        raise ConfigError("dataset_path is required for evolve")
    tasks = load_tasks(config.dataset_path)
    if config.regime == "supervised":
        require_gold(tasks)

    gateway = ModelGateway.from_config(config)
    grader = build_grader(config.grader, gateway)
    settings = EvolutionSettings(retrieval=config.retrieval, evolution=config.evolution)
    store = MemoryStore(dimension=config.embedding_dimension)

    config.ledger_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(config.ledger_path, "w", encoding="utf-8", newline="\n") as ledger:
            def write_report(report: EvolutionReport) -> None:
                ledger.write(report.model_dump_json() + "\n")
                ledger.flush()

            store, reports = run_evolution(
                tasks, store, gateway, grader, settings, on_report=write_report
            )
    finally:
        gateway.close()

    store.save_jsonl(config.memory_path)
    stats = store.stats()
    accepted = sum(1 for report in reports if report.accepted)
    print(format_summary(accepted, len(reports), stats.entry_count, stats.avg_guidance_tokens, final_accuracy(reports)))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, extra: Sequence[str]) -> int:
    config = _load_config(args, extra)
    dataset_path = config.eval_dataset_path or config.dataset_path
    if dataset_path is None:
        raise ConfigError("eval_dataset_path (or dataset_path) is required for eval")
    tasks = load_tasks(dataset_path)
    store = MemoryStore.load_jsonl(config.memory_path, dimension=config.embedding_dimension)

    gateway = ModelGateway.from_config(config)
    try:
        if config.regime == "supervised":
            require_gold(tasks)
            grader = build_grader(config.grader, gateway)
        elif all(task.gold_answer is not None for task in tasks):
            grader = ExactMatchGrader()
        else:
            grader = JudgeGrader(gateway, config.grader.judge_template)
        settings = EvolutionSettings(retrieval=config.retrieval, evolution=config.evolution)
        result = evaluate(tasks, store, gateway, grader, settings)
    finally:
        gateway.close()

    print(
        f"acc={result.accuracy:.4f} mem={result.memory_size} len={result.avg_guidance_tokens:.1f} "
        f"graded={result.graded_count}/{result.task_count}"
    )
    return EXIT_OK


def cmd_memory(args: argparse.Namespace, extra: Sequence[str]) -> int:
    if args.memory:
        memory_path = Path(args.memory)
    else:
        memory_path = _load_config(args, extra).memory_path
    store = MemoryStore.load_jsonl(memory_path)

    if args.action == "export":
        if args.output:
            store.save_jsonl(args.output)
        else:
            sys.stdout.write(store.to_jsonl())
        return EXIT_OK

    headings = " | ".join(SECTION_TITLES.values())
    for number, entry in enumerate(store, start=1):
        print(f"[{number}] {entry.subject}")
        print(f"    tokens: {count_tokens(entry.guidance.full_text())}")
        print(f"    sections: {headings}")
    stats = store.stats()
    print(f"entries={stats.entry_count} avg_len={stats.avg_guidance_tokens:.1f}")
    return EXIT_OK


def _sim_config(args: argparse.Namespace) -> SimConfig:
    document: dict = {}
    if args.config:
        try:
            document = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read simulation config {args.config}: {e}") from e
    model = dict(document.get("model", {}))
    for key, value in (("mu", args.mu), ("sigma", args.sigma), ("noise_kind", args.noise_kind)):
        if value is not None:
            model[key] = value
    document["model"] = model
    if args.sizes is not None:
        try:
            document["cluster_sizes"] = [int(size) for size in args.sizes.split(",") if size.strip()]
        except ValueError as e:
            raise ConfigError(f"--sizes must be comma-separated integers: {args.sizes}") from e
    if args.trials is not None:
        document["trials"] = args.trials
    if args.seed is not None:
        document["seed"] = args.seed
    try:
        return SimConfig.model_validate({**document, "model": AdditiveRewardModel.model_validate(model)})
    except ValidationError as e:
        raise ConfigError(f"Invalid simulation configuration:\n{e}") from e


def cmd_simulate(args: argparse.Namespace, extra: Sequence[str]) -> int:
    if extra:
        raise ConfigError(f"Unexpected arguments: {' '.join(extra)}")
    config = _sim_config(args)
    rows = run_simulation(config)
    write_sweep_csv(rows, sys.stdout)
    if args.summary:
        Path(args.summary).write_text(json.dumps(summarize(config, rows), indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote simulation summary to {args.summary}")
    return EXIT_OK


def cmd_fixture(args: argparse.Namespace, extra: Sequence[str]) -> int:
    if extra:
        raise ConfigError(f"Unexpected arguments: {' '.join(extra)}")
    print(write_arithmetic_fixture(args.directory, batch_size=args.batch_size))
    return EXIT_OK


# ============================================
# Parser
# ============================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration JSON (simulation config for simulate)")
    common.add_argument("--seed", type=int, help="Override generation.seed (simulation seed for simulate)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    common.add_argument("--log-dir", help="Directory for rotating app.log and error.log")

    parser = argparse.ArgumentParser(
        prog="mistake-notebook",
        description="Mistake-notebook memory evolution with accept-if-improves gating",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    evolve = commands.add_parser("evolve", parents=[common], help="Evolve memory over a training dataset")
    evolve.add_argument("--ledger", help="Ledger JSONL path")
    evolve.add_argument("--memory", help="Memory JSONL output path")
    evolve.add_argument("--epochs", type=int, help="Number of epochs (default: evolution.epochs)")
    evolve.set_defaults(handler=cmd_evolve)

    evaluate_cmd = commands.add_parser("eval", parents=[common], help="Evaluate a frozen memory")
    evaluate_cmd.add_argument("--memory", help="Memory JSONL to evaluate with")
    evaluate_cmd.add_argument("--ledger", help=argparse.SUPPRESS)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    memory = commands.add_parser("memory", parents=[common], help="Inspect or export a memory file")
    memory.add_argument("action", choices=["inspect", "export"])
    memory.add_argument("--memory", help="Memory JSONL path (default: memory_path of --config)")
    memory.add_argument("--output", help="Export destination (default: stdout)")
    memory.set_defaults(handler=cmd_memory)

    simulate = commands.add_parser("simulate", parents=[common], help="Run the batch-averaging simulation")
    simulate.add_argument("--mu", type=float)
    simulate.add_argument("--sigma", type=float)
    simulate.add_argument("--noise-kind", choices=["gaussian", "bounded-uniform"])
    simulate.add_argument("--sizes", help="Comma-separated cluster sizes, e.g. 1,2,4,8,16")
    simulate.add_argument("--trials", type=int)
    simulate.add_argument("--summary", help="Write a JSON summary to this path")
    simulate.set_defaults(handler=cmd_simulate)

    fixture = commands.add_parser("fixture", parents=[common], help="Write the scripted arithmetic fixture")
    fixture.add_argument("directory")
    fixture.add_argument("--batch-size", type=int, default=4)
    fixture.set_defaults(handler=cmd_fixture)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.log_level or "INFO", args.log_dir)
    try:
        return args.handler(args, extra)
    except VALIDATION_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_CONFIG
    except NotebookError as e:
        logger.error(f"{args.command} aborted: {e}", exc_info=True)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
