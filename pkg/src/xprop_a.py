"""
XProp-A: extraction tables over a finite training set, one reset-and-retrain
epoch per internal vertex, and aeons that visit children before parents.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config.settings import TABLES_FORMAT_VERSION
from src.errors import ConfigError, ConsistencyError, MissingCacheError
from src.graph import ExnetGraph, VertexId, arc_sibling
from src.neural import CP, PP, TR, LrSchedule, NetworkBundle, Optimizer, ParamKey, apply_update, backward, forward
from src.tasks import Example, TaskSpec, Tokeniser
from src.utils import get_logger, make_rng, stable_hash
from src.xprop import Mode, down_pass, evaluate, up_pass

logger = get_logger(__name__)


@dataclass
class TrainingSet:
    examples: List[Example]
    tokens: List[np.ndarray]

    @classmethod
    def build(cls, examples: Sequence[Example], tokeniser: Tokeniser) -> "TrainingSet":
        if not examples:
            raise ConfigError("XProp-A needs a non-empty training set")
        return cls(list(examples), [np.asarray(tokeniser(ex.instance), dtype=np.float64) for ex in examples])

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class ExtractionTable:
    """a[v] has one primary row per instance (leaves included); b[v] one complementary row per instance."""

    a: Dict[VertexId, np.ndarray]
    b: Dict[VertexId, np.ndarray]

    def alpha(self, v: VertexId) -> np.ndarray:
        try:
            return self.a[v]
        except KeyError:
            raise MissingCacheError(f"No primary table for vertex {v}") from None

    def beta(self, v: VertexId) -> np.ndarray:
        try:
            return self.b[v]
        except KeyError:
            raise MissingCacheError(f"No complementary table for vertex {v}") from None


@dataclass(frozen=True)
class EpochPlan:
    vertex: VertexId
    trials: int
    reset_seed: int


@dataclass(frozen=True)
class ConsistencyReport:
    passed: bool
    max_abs_diff: float
    vertex: Optional[VertexId] = None
    instance: Optional[int] = None

    def line(self, aeon: int) -> str:
        if self.passed:
            return f"aeon {aeon}: pass"
        return (
            f"aeon {aeon}: FAIL max_abs_diff={self.max_abs_diff:.3e} "
            f"vertex={self.vertex} instance={self.instance}"
        )


def _require_unshared(nets: NetworkBundle) -> None:
    if nets.sharing.is_shared:
        raise ConfigError("XProp-A does not support shared parameters")


# ---------- Schedules ----------
def aeon_schedule(g: ExnetGraph) -> List[VertexId]:
    """Every internal vertex once, each after its internal children."""
    return list(g.up_schedule[len(g.leaves):])


# ---------- Tables ----------
def init_tables(g: ExnetGraph, nets: NetworkBundle, training_set: TrainingSet) -> ExtractionTable:
    """One up pass and one DM down pass per instance with the current parameters."""
    n = len(training_set)
    a = {v: np.zeros((n, nets.d_primary)) for v in g.vertices}
    b = {v: np.zeros((n, nets.d_complementary)) for v in g.internal_vertices}
    for i, tokens in enumerate(training_set.tokens):
        primary, _ = up_pass(g, nets, tokens)
        comp = down_pass(g, nets, primary, Mode.DM, (0, i))
        for v in g.vertices:
            a[v][i] = primary[v]
        for v in g.internal_vertices:
            b[v][i] = comp.beta(v)
    return ExtractionTable(a, b)


def _complementary_sum(
    g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable, v: VertexId, i: int
) -> np.ndarray:
    if v == g.root:
        return np.zeros(nets.d_complementary)
    arcs = g.parents_of(v)
    g_spec = nets.specs[CP]
    total = None
    for a in arcs:
        z = g.arcs[a].src
        x = np.concatenate([tables.beta(z)[i], tables.alpha(arc_sibling(g, a))[i]])
        value = forward(g_spec, nets.cp(a), x)
        total = value.copy() if total is None else total + value
    return total


def epoch_keys(g: ExnetGraph, nets: NetworkBundle, v: VertexId) -> List[ParamKey]:
    return [nets.pp_key(v), nets.tr_key(v)] + [nets.cp_key(a) for a in g.parents_of(v)]


def epoch_gradients(
    g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable, v: VertexId, i: int, example: Example
) -> tuple[Dict[ParamKey, np.ndarray], float]:
    """
    Gradients of L(T(θT, F(θp, a(lch), a(rch)), Σ_z G(θc(z,v), b(z), a(σ(z,v)))))
    with respect to the three parameter blocks of v. Table entries are constants.
    """
    t_spec, f_spec, g_spec = nets.specs[TR], nets.specs[PP], nets.specs[CP]
    d_p = nets.d_primary
    left, right = g.child_vertices(v)
    x_f = np.concatenate([tables.alpha(left)[i], tables.alpha(right)[i]])
    alpha_v = forward(f_spec, nets.pp(v), x_f)
    beta_v = _complementary_sum(g, nets, tables, v, i)
    x_t = np.concatenate([alpha_v, beta_v])
    y = forward(t_spec, nets.tr(v), x_t)
    loss = example.loss
    grad_t, dx = backward(t_spec, nets.tr(v), x_t, loss.grad(y))
    grad_f, _ = backward(f_spec, nets.pp(v), x_f, dx[:d_p])
    grads = {nets.tr_key(v): grad_t, nets.pp_key(v): grad_f}
    for a in g.parents_of(v):
        z = g.arcs[a].src
        x_g = np.concatenate([tables.beta(z)[i], tables.alpha(arc_sibling(g, a))[i]])
        grads[nets.cp_key(a)], _ = backward(g_spec, nets.cp(a), x_g, dx[d_p:])
    return grads, loss(y)


# ---------- Epochs ----------
def run_epoch(
    plan: EpochPlan,
    g: ExnetGraph,
    nets: NetworkBundle,
    tables: ExtractionTable,
    training_set: TrainingSet,
    opt: Optimizer,
    schedule: Optional[LrSchedule] = None,
) -> List[float]:
    """
    Reset the networks of plan.vertex (F, T and every parent-arc G), then train
    them for plan.trials draws from the training set, the rate following
    `schedule` within the epoch. Returns the per-trial gradient norms.
    """
    if g.is_leaf(plan.vertex):
        raise ConfigError(f"Epochs run on internal vertices only, got leaf {plan.vertex}")
    keys = epoch_keys(g, nets, plan.vertex)
    nets.reset(keys, plan.reset_seed)
    opt.reset(keys)
    rng = make_rng(plan.reset_seed, 1)
    schedule = schedule or LrSchedule()
    base_lr = opt.lr
    norms = []
    try:
        for step in range(plan.trials):
            i = int(rng.integers(len(training_set)))
            grads, _ = epoch_gradients(g, nets, tables, plan.vertex, i, training_set.examples[i])
            opt.lr = schedule.at(base_lr, step, plan.trials)
            apply_update(nets, grads, opt)
            norms.append(float(np.sqrt(sum(float(x @ x) for x in grads.values()))))
    finally:
        opt.lr = base_lr
    return norms


def finalize_epoch(v: VertexId, g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable) -> None:
    """Recompute the table rows of v for every instance from the current networks."""
    f_spec = nets.specs[PP]
    left, right = g.child_vertices(v)
    rows = tables.alpha(v).shape[0]
    for i in range(rows):
        tables.a[v][i] = forward(
            f_spec, nets.pp(v), np.concatenate([tables.alpha(left)[i], tables.alpha(right)[i]])
        )
        tables.b[v][i] = _complementary_sum(g, nets, tables, v, i)


# ---------- Checks and diagnostics ----------
def check_consistency(
    g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable, training_set: TrainingSet
) -> ConsistencyReport:
    """Compare every cached primary row with a fresh up pass, bitwise."""
    worst = ConsistencyReport(True, 0.0)
    for i, tokens in enumerate(training_set.tokens):
        primary, _ = up_pass(g, nets, tokens)
        for v in g.vertices:
            cached = tables.alpha(v)[i]
            if not np.array_equal(cached, primary[v]):
                diff = float(np.max(np.abs(cached - primary[v])))
                if worst.passed or diff > worst.max_abs_diff:
                    worst = ConsistencyReport(False, diff, v, i)
    return worst


def table_losses(g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable, training_set: TrainingSet) -> np.ndarray:
    t_spec = nets.specs[TR]
    zero = np.zeros(nets.d_complementary)
    out = []
    for i, ex in enumerate(training_set.examples):
        y = forward(t_spec, nets.tr(g.root), np.concatenate([tables.alpha(g.root)[i], zero]))
        out.append(ex.loss(y))
    return np.asarray(out)


def table_local_disagreement(g: ExnetGraph, nets: NetworkBundle, tables: ExtractionTable) -> float:
    """Mean over instances of max_v ||T(v, a(v), b(v)) - T(root, a(root), b(root))||."""
    t_spec = nets.specs[TR]
    rows = tables.alpha(g.root).shape[0]
    values = []
    for i in range(rows):
        preds = {
            v: forward(t_spec, nets.tr(v), np.concatenate([tables.alpha(v)[i], tables.beta(v)[i]]))
            for v in g.internal_vertices
        }
        ref = preds[g.root]
        values.append(max(float(np.linalg.norm(p - ref)) for p in preds.values()))
    return float(np.mean(values))


# ---------- Aeons ----------
@dataclass
class AeonSettings:
    aeons: int
    epoch_trials: int
    seed: int = 0
    heldout_draws: int = 32
    heldout_seed: int = 1
    strict: bool = True
    # aeon k runs epochs of round(epoch_trials * epoch_growth ** (k - 1)) trials
    epoch_growth: float = 1.0
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)

    def epoch_length(self, aeon: int) -> int:
        return int(round(self.epoch_trials * self.epoch_growth ** (aeon - 1)))


@dataclass
class AeonHistory:
    rows: List[dict] = field(default_factory=list)
    reports: List[ConsistencyReport] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def consistent(self) -> bool:
        return all(r.passed for r in self.reports)


def _aeon_row(aeon, trials, g, nets, tables, training_set, task, settings, grad_norm, report):
    losses = table_losses(g, nets, tables, training_set)
    t_spec = nets.specs[TR]
    zero = np.zeros(nets.d_complementary)
    norms = [
        np.linalg.norm(forward(t_spec, nets.tr(g.root), np.concatenate([tables.alpha(g.root)[i], zero])))
        for i in range(len(training_set))
    ]
    heldout = evaluate(
        g, nets, task, [(settings.heldout_seed, k) for k in range(settings.heldout_draws)]
    ) if task is not None and settings.heldout_draws else float("nan")
    return {
        "trial": trials,
        "loss": float(losses.mean()),
        "prediction_norm": float(np.mean(norms)),
        "grad_norm": grad_norm,
        "local_disagreement": table_local_disagreement(g, nets, tables),
        "aeon": aeon,
        "heldout_loss": heldout,
        "consistent": int(report.passed),
    }


def run_aeons(
    g: ExnetGraph,
    nets: NetworkBundle,
    training_set: TrainingSet,
    settings: AeonSettings,
    opt: Optimizer,
    task: Optional[TaskSpec] = None,
    writer=None,
    tables: Optional[ExtractionTable] = None,
) -> tuple[ExtractionTable, AeonHistory]:
    """
    Aeon loop. Row 0 describes the initial tables; every aeon adds one row
    and one consistency report. With `strict`, a failed report raises
    ConsistencyError once its row is written.
    """
    _require_unshared(nets)
    start = time.perf_counter()
    if tables is None:
        tables = init_tables(g, nets, training_set)
    history = AeonHistory()
    schedule = aeon_schedule(g)
    trials = 0
    logger.info(
        "🚀 XProp-A: %d aeons x %d epochs x %d trials, %d instances",
        settings.aeons, len(schedule), settings.epoch_trials, len(training_set),
    )

    def record(aeon: int, grad_norm: float, report: ConsistencyReport) -> None:
        row = _aeon_row(aeon, trials, g, nets, tables, training_set, task, settings, grad_norm, report)
        history.rows.append(row)
        if writer is not None:
            writer.write(row)
            writer.flush()

    try:
        record(0, 0.0, check_consistency(g, nets, tables, training_set))
        for aeon in range(1, settings.aeons + 1):
            norms: List[float] = []
            for v in schedule:
                plan = EpochPlan(v, settings.epoch_length(aeon), stable_hash(f"{settings.seed}:{aeon}:{v}"))
                norms.extend(run_epoch(plan, g, nets, tables, training_set, opt, settings.lr_schedule))
                finalize_epoch(v, g, nets, tables)
                trials += plan.trials
            report = check_consistency(g, nets, tables, training_set)
            history.reports.append(report)
            record(aeon, float(np.mean(norms)) if norms else 0.0, report)
            logger.info(
                "🔁 aeon %d: loss %.6g, %s", aeon, history.rows[-1]["loss"], report.line(aeon)
            )
            if not report.passed:
                logger.error("❌ %s", report.line(aeon))
                if settings.strict:
                    raise ConsistencyError(report.line(aeon))
    finally:
        history.wall_time = time.perf_counter() - start
    logger.info("✅ XProp-A done in %.1fs", history.wall_time)
    return tables, history


# ---------- Spill ----------
def save_tables(tables: ExtractionTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": TABLES_FORMAT_VERSION, "a": sorted(tables.a), "b": sorted(tables.b)}
    arrays = {f"a{v}": tables.a[v] for v in tables.a}
    arrays.update({f"b{v}": tables.b[v] for v in tables.b})
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    logger.info("💾 Tables saved: %s", path)
    return path


def load_tables(path: str | Path) -> ExtractionTable:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != TABLES_FORMAT_VERSION:
            raise ConfigError(f"Unsupported tables version: {meta.get('format_version')}")
        a = {int(v): data[f"a{v}"].copy() for v in meta["a"]}
        b = {int(v): data[f"b{v}"].copy() for v in meta["b"]}
    return ExtractionTable(a, b)
