# main.py
"""
exnet - extraction networks trained by extraction propagation
-------------------------------------------------------------
Commands:
  train       XProp trial loop            -> metrics.csv, checkpoint.npz
  train-a     XProp-A aeons               -> metrics.csv, consistency.txt, tables.npz
  gradcheck   finite-difference audit of every gradient formula
  dump-graph  DOT rendering of the configured exnet

Usage: python main.py <command> <config.json> [--out DIR] [--seed-override N]
Log verbosity: EXNET_LOG_LEVEL=DEBUG|INFO|WARNING
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from config.schemas import RunConfig
from config.settings import (
    AEON_COLUMNS,
    CHECKPOINT_FILE,
    CONSISTENCY_FILE,
    EXIT_CONFIG,
    EXIT_GRADCHECK,
    EXIT_INCONSISTENT,
    EXIT_NUMERIC,
    EXIT_OK,
    GRAPH_FILE,
    METRIC_COLUMNS,
    METRICS_FILE,
    SUMMARY_FILE,
    TABLES_FILE,
    TRAINING_SET_FILE,
)
from src.builders import BuilderOutput, build
from src.errors import ConfigError, ConsistencyError, NonFiniteGradientError
from src.gradcheck import run_gradcheck
from src.graph import require_valid, to_dot
from src.metrics import MetricsWriter
from src.neural import LrSchedule, NetworkBundle, Optimizer, make_optimizer, role_specs, save_checkpoint
from src.tasks import TaskSpec, export_training_set, load_training_set, make_task, tokeniser_for
from src.utils import config_digest, configure_logging, ensure_dir, get_logger
from src.xprop import Mode, TrainSettings, train_xprop
from src.xprop_a import AeonSettings, TrainingSet, run_aeons, save_tables

logger = get_logger("exnet")


# ------------------ Config and setup ------------------
def load_run_config(path: str | Path, seed_override: Optional[int] = None) -> RunConfig:
    """Read and validate a JSON run configuration."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = RunConfig.model_validate(raw)
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config {path} is not valid JSON: {exc}") from exc
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']}") from exc
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override)
    return cfg


@dataclass
class Setup:
    config: RunConfig
    built: BuilderOutput
    nets: NetworkBundle
    task: TaskSpec
    opt: Optimizer

    @property
    def graph(self):
        return self.built.graph


def build_setup(cfg: RunConfig) -> Setup:
    built = build(cfg.builder.name, cfg.builder.params, cfg.builder.supernode_width)
    require_valid(built.graph)
    dims = cfg.dims
    task = make_task(
        cfg.task.name, cfg.task.params, cfg.seeds.task, dims.d_primary, tokeniser_for(built, dims.d_primary)
    )
    specs = role_specs(
        dims.d_primary,
        dims.d_complementary,
        task.output_dim,
        hidden=dims.hidden,
        activation=dims.activation,
        extraction_activation=dims.extraction_activation,
    )
    nets = NetworkBundle.create(built.graph, built.sharing, specs, cfg.seeds.init)
    o = cfg.optimizer
    opt = make_optimizer(o.kind, o.lr, o.beta1, o.beta2, o.eps)
    logger.info(
        "🧩 %s: %d vertices, %d arcs, %d parameter groups",
        built.name, built.graph.n_vertices, len(built.graph.arcs), len(nets.group_keys()),
    )
    return Setup(cfg, built, nets, task, opt)


def _lr_schedule(cfg: RunConfig) -> LrSchedule:
    return LrSchedule(cfg.optimizer.schedule, cfg.optimizer.lr_min)


def _run_dir(cfg: RunConfig, out: Optional[str]) -> Path:
    return ensure_dir(Path(out) if out else Path(cfg.output.dir) / cfg.name)


def _header(cfg: RunConfig, command: str) -> Dict[str, Any]:
    return {
        "command": command,
        "schema_version": cfg.schema_version,
        "config_digest": config_digest(cfg.model_dump(mode="json")),
        "builder": cfg.builder.name,
        "task": cfg.task.name,
        "mode": cfg.train.mode,
        "seed_init": cfg.seeds.init,
        "seed_task": cfg.seeds.task,
        "seed_sm": cfg.seeds.sm,
    }


def _write_summary(run_dir: Path, payload: Dict[str, Any]) -> None:
    (run_dir / SUMMARY_FILE).write_text(json.dumps(payload, indent=2), encoding="utf-8")


# ------------------ Commands ------------------
def cmd_train(config_path: str, out: Optional[str] = None, seed_override: Optional[int] = None) -> int:
    """XProp trial loop: metrics CSV plus a final checkpoint."""
    cfg = load_run_config(config_path, seed_override)
    setup = build_setup(cfg)
    run_dir = _run_dir(cfg, out)
    settings = TrainSettings(
        trials=cfg.train.trials,
        mode=Mode(cfg.train.mode),
        task_seed=cfg.seeds.task,
        sm_seed=cfg.seeds.sm,
        batch_size=cfg.train.batch_size,
        log_every=cfg.train.log_every,
        lr_schedule=_lr_schedule(cfg),
    )
    writer = MetricsWriter(run_dir / METRICS_FILE, METRIC_COLUMNS, _header(cfg, "train"), cfg.train.flush_every)
    try:
        summary = train_xprop(setup.graph, setup.nets, setup.task, setup.opt, settings, writer)
    finally:
        writer.close()
    if cfg.output.checkpoint:
        save_checkpoint(setup.nets, run_dir / CHECKPOINT_FILE)
    _write_summary(
        run_dir,
        {
            "command": "train",
            "trials": summary.trials,
            "mean_loss_first": summary.mean_loss_first,
            "mean_loss_last": summary.mean_loss_last,
            "wall_time_s": summary.wall_time,
        },
    )
    print(f"✅ Metrics saved to {run_dir / METRICS_FILE}")
    return EXIT_OK


def cmd_train_a(config_path: str, out: Optional[str] = None, seed_override: Optional[int] = None) -> int:
    """XProp-A aeons with a consistency report per aeon; exit 4 if any check fails."""
    cfg = load_run_config(config_path, seed_override)
    setup = build_setup(cfg)
    if setup.built.sharing.is_shared:
        raise ConfigError(f"XProp-A does not support shared parameters (builder '{cfg.builder.name}')")
    run_dir = _run_dir(cfg, out)
    xa = cfg.xprop_a
    if xa.training_set_path:
        examples = load_training_set(xa.training_set_path)
        logger.info("📂 Training set loaded from %s", xa.training_set_path)
    else:
        examples = setup.task.training_set(xa.training_set_size, cfg.seeds.task)
    if len(examples) > xa.max_training_set:
        raise ConfigError(f"Training set of {len(examples)} exceeds cap {xa.max_training_set}")
    training_set = TrainingSet.build(examples, setup.task.tokeniser)
    export_training_set(examples, run_dir / TRAINING_SET_FILE, cfg.task.name)
    settings = AeonSettings(
        aeons=xa.aeons,
        epoch_trials=xa.epoch_trials,
        seed=cfg.seeds.init,
        heldout_draws=xa.heldout_draws,
        heldout_seed=cfg.seeds.task + 1,
        strict=False,
        epoch_growth=xa.epoch_growth,
        lr_schedule=_lr_schedule(cfg),
    )
    writer = MetricsWriter(run_dir / METRICS_FILE, AEON_COLUMNS, _header(cfg, "train-a"), cfg.train.flush_every)
    try:
        tables, history = run_aeons(
            setup.graph, setup.nets, training_set, settings, setup.opt, task=setup.task, writer=writer
        )
    finally:
        writer.close()

    lines = [r.line(k) for k, r in enumerate(history.reports, start=1)]
    (run_dir / CONSISTENCY_FILE).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    for line in lines:
        print(f"🧾 {line}")
    if xa.spill_tables:
        save_tables(tables, run_dir / TABLES_FILE)
    if cfg.output.checkpoint:
        save_checkpoint(setup.nets, run_dir / CHECKPOINT_FILE)
    _write_summary(
        run_dir,
        {
            "command": "train-a",
            "aeons": xa.aeons,
            "consistent": history.consistent,
            "final_loss": history.rows[-1]["loss"] if history.rows else None,
            "wall_time_s": history.wall_time,
        },
    )
    return EXIT_OK if history.consistent else EXIT_INCONSISTENT


def cmd_gradcheck(config_path: str, out: Optional[str] = None, seed_override: Optional[int] = None) -> int:
    """Max relative error per role and mode; exit 5 when any exceeds the tolerance."""
    cfg = load_run_config(config_path, seed_override)
    setup = build_setup(cfg)
    gc = cfg.gradcheck
    report = run_gradcheck(
        setup.graph, setup.nets, setup.task, gc.modes, gc.draws, cfg.seeds.sm, gc.step, gc.tolerance
    )
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"✅ gradcheck passed (tolerance {gc.tolerance:g})")
        return EXIT_OK
    print(f"❌ gradcheck failed (tolerance {gc.tolerance:g})")
    return EXIT_GRADCHECK


def cmd_dump_graph(config_path: str, out_path: Optional[str] = None, seed_override: Optional[int] = None) -> int:
    """Write the configured exnet as DOT; `out_path` is a file or directory."""
    cfg = load_run_config(config_path, seed_override)
    built = build(cfg.builder.name, cfg.builder.params, cfg.builder.supernode_width)
    require_valid(built.graph)
    target = Path(out_path) if out_path else Path(cfg.output.dir) / cfg.name / GRAPH_FILE
    if target.suffix != ".dot":
        target = target / GRAPH_FILE
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(to_dot(built.graph, cfg.name), encoding="utf-8")
    print(f"✅ Graph saved to {target} ({built.graph.n_vertices} vertices, {len(built.graph.arcs)} arcs)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "train-a": cmd_train_a,
    "gradcheck": cmd_gradcheck,
    "dump-graph": cmd_dump_graph,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exnet", description="Extraction networks: train, audit, dump.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="Path to a JSON run configuration.")
    parser.add_argument("--out", default=None, help="Output directory (DOT file or directory for dump-graph).")
    parser.add_argument("--seed-override", type=int, default=None, help="Use seeds N, N+1, N+2.")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args.config, args.out, args.seed_override)
    except ConfigError as exc:
        print(f"⚠️ Config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteGradientError as exc:
        print(f"❌ Numeric blow-up: {exc} (partial metrics kept)", file=sys.stderr)
        return EXIT_NUMERIC
    except ConsistencyError as exc:
        print(f"❌ Inconsistent tables: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except (ValueError, OSError) as exc:
        print(f"⚠️ {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
