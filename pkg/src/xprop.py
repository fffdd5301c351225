"""
Extraction propagation: one trial is an up pass, a root prediction, a down
pass in stochastic (SM) or deterministic (DM) mode, and one local gradient
step for every trainer, primary propagator and complementary propagator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.errors import DimensionError, GraphError, MissingCacheError, NonFiniteGradientError
from src.graph import ArcId, ExnetGraph, VertexId, arc_sibling
from src.neural import CP, PP, TR, LrSchedule, NetworkBundle, Optimizer, ParamKey, apply_update, backward, forward
from src.tasks import LossFn, TaskSpec
from src.utils import get_logger, make_rng

logger = get_logger(__name__)


class Mode(str, Enum):
    SM = "SM"
    DM = "DM"


@dataclass
class PrimaryCache:
    alpha: Dict[VertexId, np.ndarray]

    def __getitem__(self, v: VertexId) -> np.ndarray:
        try:
            return self.alpha[v]
        except KeyError:
            raise MissingCacheError(f"No primary extraction for vertex {v}") from None


@dataclass
class ComplementaryCache:
    vertex_beta: Dict[VertexId, np.ndarray]
    arc_beta: Dict[ArcId, np.ndarray]
    sm_choices: Dict[VertexId, ArcId] = field(default_factory=dict)

    def beta(self, v: VertexId) -> np.ndarray:
        try:
            return self.vertex_beta[v]
        except KeyError:
            raise MissingCacheError(f"No complementary extraction for vertex {v}") from None

    def arc(self, a: ArcId) -> np.ndarray:
        try:
            return self.arc_beta[a]
        except KeyError:
            raise MissingCacheError(f"No complementary extraction for arc {a}") from None


@dataclass(frozen=True)
class TrialSeed:
    """Per-trial randomness: task draws keyed by (task, trial), SM choices by (sm, trial)."""

    task: int
    sm: int
    trial: int

    @property
    def draw_key(self) -> Tuple[int, int]:
        return (self.task, self.trial)

    @property
    def sm_key(self) -> Tuple[int, int]:
        return (self.sm, self.trial)


@dataclass
class TrialResult:
    prediction: np.ndarray
    loss_value: float
    grads: Dict[ParamKey, np.ndarray]
    diagnostics: Optional[Dict[VertexId, np.ndarray]] = None
    root: Optional[VertexId] = None

    @property
    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(g @ g) for g in self.grads.values())))

    @property
    def local_disagreement(self) -> float:
        return float("nan") if self.diagnostics is None else disagreement(self.diagnostics, self.root)


def _ready(g: ExnetGraph) -> None:
    if not g.report.valid:
        raise GraphError(f"Invalid exnet: {', '.join(g.report.rules())}")


def _pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([a, b])


# ---------- Passes ----------
def up_pass(g: ExnetGraph, nets: NetworkBundle, tokens: Sequence[np.ndarray]) -> Tuple[PrimaryCache, np.ndarray]:
    """Primary extractions from the leaves to the root, then the root prediction."""
    _ready(g)
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape != (len(g.leaves), nets.d_primary):
        raise DimensionError(
            f"Tokens must have shape ({len(g.leaves)}, {nets.d_primary}), got {tokens.shape}"
        )
    alpha: Dict[VertexId, np.ndarray] = {leaf: tokens[i] for i, leaf in enumerate(g.leaves)}
    f_spec = nets.specs[PP]
    for v in g.up_schedule[len(g.leaves):]:
        left, right = g.child_vertices(v)
        alpha[v] = forward(f_spec, nets.pp(v), _pair(alpha[left], alpha[right]))
    prediction = forward(
        nets.specs[TR], nets.tr(g.root), _pair(alpha[g.root], np.zeros(nets.d_complementary))
    )
    return PrimaryCache(alpha), prediction


def down_pass(
    g: ExnetGraph,
    nets: NetworkBundle,
    primary: PrimaryCache,
    mode: Mode,
    rng_seed: int | Sequence[int],
) -> ComplementaryCache:
    """
    Complementary extractions from the root down. The SM choice at v comes
    from its own stream keyed by (rng_seed, v).
    """
    _ready(g)
    mode = Mode(mode)
    g_spec = nets.specs[CP]
    vertex_beta = {g.root: np.zeros(nets.d_complementary)}
    arc_beta: Dict[ArcId, np.ndarray] = {}
    choices: Dict[VertexId, ArcId] = {}

    for v in g.down_schedule:
        if v == g.root:
            continue
        arcs = g.parents_of(v)
        for a in arcs:
            z = g.arcs[a].src
            arc_beta[a] = forward(g_spec, nets.cp(a), _pair(vertex_beta[z], primary[arc_sibling(g, a)]))
        if mode is Mode.SM:
            pick = arcs[int(make_rng(rng_seed, v).integers(len(arcs)))] if len(arcs) > 1 else arcs[0]
            choices[v] = pick
            vertex_beta[v] = arc_beta[pick]
        else:
            total = arc_beta[arcs[0]].copy()
            for a in arcs[1:]:
                total += arc_beta[a]
            vertex_beta[v] = total
    return ComplementaryCache(vertex_beta, arc_beta, choices)


# ---------- Gradients ----------
def _accumulate(grads: Dict[ParamKey, np.ndarray], key: ParamKey, g: np.ndarray) -> None:
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g.copy()


def compute_gradients(
    g: ExnetGraph,
    nets: NetworkBundle,
    primary: PrimaryCache,
    comp: ComplementaryCache,
    loss: LossFn,
    mode: Mode,
) -> Dict[ParamKey, np.ndarray]:
    """
    Local gradients for every internal vertex v, all taken at the current
    parameters:
      - trainer: d/dθT(v) L(T(θT(v), α(v), β(v)))
      - primary propagator: through T (held fixed) into F at α(v)
      - complementary propagator of each parent arc (z, v): through T into G.
        DM backpropagates the summed β(v); SM substitutes the arc's own
        β(z, v) for β(v), one trainer evaluation per parent arc.
    Shared groups receive the sum of their members' gradients.
    """
    mode = Mode(mode)
    t_spec, f_spec, g_spec = nets.specs[TR], nets.specs[PP], nets.specs[CP]
    d_p = nets.d_primary
    grads = nets.zero_grads()

    for v in g.internal_vertices:
        alpha_v = primary[v]
        beta_v = comp.beta(v)
        theta_t = nets.tr(v)
        x_t = _pair(alpha_v, beta_v)
        grad_t, dx = backward(t_spec, theta_t, x_t, loss.grad(forward(t_spec, theta_t, x_t)))
        _accumulate(grads, nets.tr_key(v), grad_t)

        left, right = g.child_vertices(v)
        grad_f, _ = backward(f_spec, nets.pp(v), _pair(primary[left], primary[right]), dx[:d_p])
        _accumulate(grads, nets.pp_key(v), grad_f)

        for a in g.parents_of(v):
            z = g.arcs[a].src
            x_g = _pair(comp.beta(z), primary[arc_sibling(g, a)])
            if mode is Mode.DM or comp.sm_choices.get(v) == a:
                d_beta = dx[d_p:]
            else:
                x_arc = _pair(alpha_v, comp.arc(a))
                _, dx_arc = backward(t_spec, theta_t, x_arc, loss.grad(forward(t_spec, theta_t, x_arc)))
                d_beta = dx_arc[d_p:]
            grad_g, _ = backward(g_spec, nets.cp(a), x_g, d_beta)
            _accumulate(grads, nets.cp_key(a), grad_g)
    return grads


# ---------- Local predictions ----------
def local_predictions(
    g: ExnetGraph, nets: NetworkBundle, primary: PrimaryCache, comp: ComplementaryCache
) -> Dict[VertexId, np.ndarray]:
    """T(θT(v), α(v), β(v)) at every internal vertex; the root entry is the prediction."""
    t_spec = nets.specs[TR]
    return {
        v: forward(t_spec, nets.tr(v), _pair(primary[v], comp.beta(v))) for v in g.internal_vertices
    }


def disagreement(preds: Mapping[VertexId, np.ndarray], root: VertexId) -> float:
    """max_v ||λ(v) - λ(root)||."""
    ref = preds[root]
    return float(max(np.linalg.norm(p - ref) for p in preds.values()))


def local_disagreement(
    g: ExnetGraph, nets: NetworkBundle, primary: PrimaryCache, comp: ComplementaryCache
) -> float:
    return disagreement(local_predictions(g, nets, primary, comp), g.root)


# ---------- Trials ----------
def run_trial(
    g: ExnetGraph,
    nets: NetworkBundle,
    task: TaskSpec,
    opt: Optimizer,
    mode: Mode,
    trial_seed: TrialSeed,
    apply: bool = True,
    diagnostics: bool = False,
) -> TrialResult:
    """
    Draw -> tokenise -> up pass -> predict -> loss revealed -> down pass ->
    gradients -> update. Returns the pre-update prediction and loss.
    """
    example = task.draw(trial_seed.draw_key)
    primary, prediction = up_pass(g, nets, task.tokens(example))
    loss = example.loss
    loss_value = loss(prediction)
    if not np.isfinite(loss_value):
        raise NonFiniteGradientError(f"Non-finite loss at trial {trial_seed.trial}")
    comp = down_pass(g, nets, primary, mode, trial_seed.sm_key)
    grads = compute_gradients(g, nets, primary, comp, loss, mode)
    local = None
    if diagnostics:
        local = local_predictions(g, nets, primary, comp)
    if apply:
        apply_update(nets, grads, opt)
    return TrialResult(
        prediction=prediction, loss_value=loss_value, grads=grads, diagnostics=local, root=g.root
    )


def evaluate(
    g: ExnetGraph, nets: NetworkBundle, task: TaskSpec, seeds: Sequence[int | Sequence[int]]
) -> float:
    """Mean loss of root predictions on the given draws; no parameter changes."""
    losses = []
    for seed in seeds:
        example = task.draw(seed)
        _, prediction = up_pass(g, nets, task.tokens(example))
        losses.append(example.loss(prediction))
    return float(np.mean(losses)) if losses else float("nan")


def mean_disagreement(
    g: ExnetGraph,
    nets: NetworkBundle,
    task: TaskSpec,
    examples: Sequence,
    mode: Mode = Mode.DM,
    sm_seed: int = 0,
) -> float:
    """Mean over instances of max_v ||λ(v) - λ(root)||."""
    values = []
    for i, example in enumerate(examples):
        primary, _ = up_pass(g, nets, task.tokens(example))
        comp = down_pass(g, nets, primary, mode, (sm_seed, i))
        values.append(local_disagreement(g, nets, primary, comp))
    return float(np.mean(values))


# ---------- Training loop ----------
@dataclass
class TrainSettings:
    trials: int
    mode: Mode = Mode.DM
    task_seed: int = 0
    sm_seed: int = 0
    batch_size: int = 1
    log_every: int = 1000
    first_trial: int = 0
    lr_schedule: LrSchedule = field(default_factory=LrSchedule)


@dataclass
class TrainSummary:
    trials: int
    mean_loss_first: float
    mean_loss_last: float
    wall_time: float
    losses: List[float] = field(repr=False, default_factory=list)


def train_xprop(
    g: ExnetGraph,
    nets: NetworkBundle,
    task: TaskSpec,
    opt: Optimizer,
    settings: TrainSettings,
    writer=None,
) -> TrainSummary:
    """
    Trial loop. Gradients of `batch_size` consecutive trials are averaged
    before one update; batch_size=1 is the plain per-trial rule. The optimizer
    rate follows `lr_schedule` over the run and is restored afterwards. A
    non-finite loss or gradient stops the run after flushing the rows written
    so far.
    """
    mode = Mode(settings.mode)
    start = time.perf_counter()
    losses: List[float] = []
    pending: Dict[ParamKey, np.ndarray] = {}
    in_batch = 0
    base_lr = opt.lr
    logger.info(
        "🚀 XProp: %d trials, mode=%s, %d internal vertices, %d parameters",
        settings.trials, mode.value, len(g.internal_vertices), nets.n_params(),
    )
    try:
        for t in range(settings.first_trial, settings.first_trial + settings.trials):
            opt.lr = settings.lr_schedule.at(base_lr, t - settings.first_trial, settings.trials)
            result = run_trial(
                g, nets, task, opt, mode,
                TrialSeed(settings.task_seed, settings.sm_seed, t),
                apply=settings.batch_size == 1,
                diagnostics=True,
            )
            losses.append(result.loss_value)
            if settings.batch_size > 1:
                for key, grad in result.grads.items():
                    _accumulate(pending, key, grad)
                in_batch += 1
                if in_batch == settings.batch_size:
                    apply_update(nets, {k: v / in_batch for k, v in pending.items()}, opt)
                    pending, in_batch = {}, 0
            if writer is not None:
                writer.write(
                    {
                        "trial": t + 1,
                        "loss": result.loss_value,
                        "prediction_norm": float(np.linalg.norm(result.prediction)),
                        "grad_norm": result.grad_norm,
                        "local_disagreement": result.local_disagreement,
                    }
                )
            if settings.log_every and (t + 1) % settings.log_every == 0:
                window = losses[-settings.log_every:]
                logger.info("🔁 trial %d: mean loss %.6g", t + 1, float(np.mean(window)))
        if in_batch:
            apply_update(nets, {k: v / in_batch for k, v in pending.items()}, opt)
    except NonFiniteGradientError:
        logger.error("❌ Numeric blow-up after %d trials", len(losses))
        raise
    finally:
        opt.lr = base_lr
        if writer is not None:
            writer.flush()

    window = max(1, min(1000, len(losses) // 10 or 1))
    summary = TrainSummary(
        trials=len(losses),
        mean_loss_first=float(np.mean(losses[:window])) if losses else float("nan"),
        mean_loss_last=float(np.mean(losses[-window:])) if losses else float("nan"),
        wall_time=time.perf_counter() - start,
        losses=losses,
    )
    logger.info(
        "✅ XProp done: loss %.6g -> %.6g in %.1fs",
        summary.mean_loss_first, summary.mean_loss_last, summary.wall_time,
    )
    return summary
