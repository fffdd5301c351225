"""Central finite-difference audit of the per-vertex gradient formulas."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import GRADCHECK_REL_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE
from src import xprop
from src.graph import ExnetGraph, arc_sibling
from src.neural import CP, PP, ROLES, TR, NetworkBundle, ParamKey, forward
from src.tasks import LossFn, TaskSpec
from src.utils import get_logger, relative_error

logger = get_logger(__name__)

Scalar = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class Offender:
    key: ParamKey
    index: int
    analytic: float
    numeric: float
    error: float


@dataclass
class GradcheckReport:
    tolerance: float
    max_error: Dict[Tuple[str, str], float] = field(default_factory=dict)  # (mode, role) -> max rel err
    worst: Optional[Offender] = None
    worst_mode: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_error.values())

    def note(self, mode: str, role: str, offender: Offender) -> None:
        key = (mode, role)
        self.max_error[key] = max(self.max_error.get(key, 0.0), offender.error)
        if self.worst is None or offender.error > self.worst.error:
            self.worst, self.worst_mode = offender, mode

    def merge(self, other: "GradcheckReport") -> None:
        for key, err in other.max_error.items():
            self.max_error[key] = max(self.max_error.get(key, 0.0), err)
        if other.worst is not None and (self.worst is None or other.worst.error > self.worst.error):
            self.worst, self.worst_mode = other.worst, other.worst_mode

    def lines(self) -> List[str]:
        out = [
            f"{mode:>2} {role:>2}  max_rel_err={err:.3e}"
            for (mode, role), err in sorted(self.max_error.items())
        ]
        if self.worst is not None:
            w = self.worst
            out.append(
                f"worst: mode={self.worst_mode} group={w.key[0]}:{w.key[1]} index={w.index} "
                f"analytic={w.analytic:.6e} numeric={w.numeric:.6e} rel_err={w.error:.3e}"
            )
        return out


def numeric_gradient(fn: Scalar, theta: np.ndarray, step: float = GRADCHECK_STEP) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        up = fn(theta)
        theta[i] = old - step
        down = fn(theta)
        theta[i] = old
        grad[i] = (up - down) / (2.0 * step)
    return grad


def _member_scalars(
    g: ExnetGraph,
    nets: NetworkBundle,
    primary: xprop.PrimaryCache,
    comp: xprop.ComplementaryCache,
    loss: LossFn,
    mode: xprop.Mode,
) -> List[Tuple[ParamKey, np.ndarray, Scalar]]:
    """(group, member parameters, scalar loss of those parameters) for every member."""
    t_spec, f_spec, g_spec = nets.specs[TR], nets.specs[PP], nets.specs[CP]
    out = []
    for v in g.internal_vertices:
        alpha_v, beta_v = primary[v], comp.beta(v)
        theta_t = nets.tr(v)
        left, right = g.child_vertices(v)
        x_f = np.concatenate([primary[left], primary[right]])

        def trainer(theta, alpha_v=alpha_v, beta_v=beta_v):
            return loss(forward(t_spec, theta, np.concatenate([alpha_v, beta_v])))

        def propagator(theta, theta_t=theta_t, x_f=x_f, beta_v=beta_v):
            return loss(forward(t_spec, theta_t, np.concatenate([forward(f_spec, theta, x_f), beta_v])))

        out.append((nets.tr_key(v), theta_t, trainer))
        out.append((nets.pp_key(v), nets.pp(v), propagator))

        arcs = g.parents_of(v)
        inputs = {
            a: np.concatenate([comp.beta(g.arcs[a].src), primary[arc_sibling(g, a)]]) for a in arcs
        }
        for a in arcs:
            if mode is xprop.Mode.SM:
                def complementary(theta, theta_t=theta_t, alpha_v=alpha_v, x_g=inputs[a]):
                    return loss(forward(t_spec, theta_t, np.concatenate([alpha_v, forward(g_spec, theta, x_g)])))
            else:
                def complementary(theta, theta_t=theta_t, alpha_v=alpha_v, a=a, arcs=arcs, inputs=inputs):
                    total = np.zeros(nets.d_complementary)
                    for b in arcs:
                        total = total + forward(g_spec, theta if b == a else nets.cp(b), inputs[b])
                    return loss(forward(t_spec, theta_t, np.concatenate([alpha_v, total])))
            out.append((nets.cp_key(a), nets.cp(a), complementary))
    return out


def check_trial(
    g: ExnetGraph,
    nets: NetworkBundle,
    tokens: np.ndarray,
    loss: LossFn,
    mode: xprop.Mode,
    sm_seed: int | Sequence[int] = 0,
    step: float = GRADCHECK_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradcheckReport:
    """
    Compare compute_gradients against finite differences of each member's
    scalar loss (caches held fixed), summed per sharing group.
    """
    mode = xprop.Mode(mode)
    primary, _ = xprop.up_pass(g, nets, tokens)
    comp = xprop.down_pass(g, nets, primary, mode, sm_seed)
    analytic = xprop.compute_gradients(g, nets, primary, comp, loss, mode)

    numeric = nets.zero_grads()
    for key, theta, fn in _member_scalars(g, nets, primary, comp, loss, mode):
        numeric[key] += numeric_gradient(fn, theta, step)

    report = GradcheckReport(tolerance=tolerance)
    for role in ROLES:
        report.max_error.setdefault((mode.value, role), 0.0)
    for key, num in numeric.items():
        errors = relative_error(analytic[key], num, GRADCHECK_REL_FLOOR)
        i = int(np.argmax(errors)) if errors.size else 0
        if errors.size:
            report.note(mode.value, key[0], Offender(key, i, float(analytic[key][i]), float(num[i]), float(errors[i])))
    return report


def run_gradcheck(
    g: ExnetGraph,
    nets: NetworkBundle,
    task: TaskSpec,
    modes: Sequence[str],
    draws: int = 1,
    seed: int = 0,
    step: float = GRADCHECK_STEP,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradcheckReport:
    total = GradcheckReport(tolerance=tolerance)
    for mode in modes:
        for k in range(draws):
            example = task.draw((seed, k))
            report = check_trial(g, nets, task.tokens(example), example.loss, xprop.Mode(mode), (seed, k), step, tolerance)
            total.merge(report)
    for line in total.lines():
        logger.info("🧪 %s", line)
    return total
