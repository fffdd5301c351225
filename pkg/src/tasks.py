"""Instance distributions, tokenisers and losses for desk-scale experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from src.errors import ConfigError, DimensionError
from src.graph import VertexId
from src.utils import get_logger, make_rng, stable_hash

logger = get_logger(__name__)

TASK_NAMES = ("token_sum_regression", "parity_classification", "memorize_k")


# ---------- Losses ----------
@dataclass(frozen=True)
class LossFn:
    """A differentiable loss revealed after the prediction: value and gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = "loss"

    def __call__(self, y: np.ndarray) -> float:
        return self.value(y)


def _check_dim(y: np.ndarray, dim: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (dim,):
        raise DimensionError(f"Prediction must have shape ({dim},), got {y.shape}")
    return y


def squared_loss(target: Sequence[float] | np.ndarray) -> LossFn:
    target = np.asarray(target, dtype=np.float64).copy()
    if target.ndim != 1:
        raise DimensionError(f"Target must be a vector, got shape {target.shape}")
    dim = target.shape[0]

    def value(y: np.ndarray) -> float:
        diff = _check_dim(y, dim) - target
        return float(diff @ diff)

    def grad(y: np.ndarray) -> np.ndarray:
        return 2.0 * (_check_dim(y, dim) - target)

    return LossFn(value=value, grad=grad, dim=dim, name="squared")


def _softmax(y: np.ndarray) -> np.ndarray:
    e = np.exp(y - np.max(y))
    return e / e.sum()


def softmax_xent_loss(class_index: int, num_classes: int) -> LossFn:
    if num_classes < 2:
        raise ConfigError(f"Cross-entropy needs at least 2 classes, got {num_classes}")
    if not 0 <= class_index < num_classes:
        raise ConfigError(f"Class index {class_index} outside [0, {num_classes})")

    def value(y: np.ndarray) -> float:
        y = _check_dim(y, num_classes)
        shifted = y - np.max(y)
        return float(np.log(np.exp(shifted).sum()) - shifted[class_index])

    def grad(y: np.ndarray) -> np.ndarray:
        p = _softmax(_check_dim(y, num_classes))
        p[class_index] -= 1.0
        return p

    return LossFn(value=value, grad=grad, dim=num_classes, name="softmax_xent")


# ---------- Tokenisers ----------
Tokeniser = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PartitionTokeniser:
    """
    Leaf i receives components [i*d_P, (i+1)*d_P) of the instance. Shorter
    instances are padded with trailing zeros; longer ones are rejected.
    """

    d_primary: int
    leaf_count: int

    def __call__(self, instance: np.ndarray) -> np.ndarray:
        x = np.asarray(instance, dtype=np.float64).ravel()
        size = self.d_primary * self.leaf_count
        if x.size > size:
            raise DimensionError(f"Instance has {x.size} components, tokeniser expects at most {size}")
        padded = np.zeros(size)
        padded[: x.size] = x
        return padded.reshape(self.leaf_count, self.d_primary)


def partition_tokeniser(d_primary: int, leaf_count: int) -> PartitionTokeniser:
    if d_primary < 1 or leaf_count < 1:
        raise ConfigError(f"Bad tokeniser shape d_P={d_primary}, leaves={leaf_count}")
    return PartitionTokeniser(d_primary, leaf_count)


@dataclass(frozen=True)
class LeafTokeniser:
    """Partition into slots, then route slots to leaves; unbound leaves get zeros."""

    slots: PartitionTokeniser
    leaf_slots: tuple  # per leaf, in leaf order: slot index or None

    def __call__(self, instance: np.ndarray) -> np.ndarray:
        by_slot = self.slots(instance)
        out = np.zeros((len(self.leaf_slots), self.slots.d_primary))
        for i, slot in enumerate(self.leaf_slots):
            if slot is not None:
                out[i] = by_slot[slot]
        return out


def leaf_tokeniser(
    binding: Mapping[VertexId, Optional[int]],
    leaves: Sequence[VertexId],
    d_primary: int,
    n_slots: int,
) -> LeafTokeniser:
    leaf_slots = []
    for leaf in leaves:
        slot = binding[leaf]
        if slot is not None and not 0 <= slot < n_slots:
            raise ConfigError(f"Leaf {leaf} bound to slot {slot}, outside [0, {n_slots})")
        leaf_slots.append(slot)
    return LeafTokeniser(partition_tokeniser(d_primary, n_slots), tuple(leaf_slots))


def tokeniser_for(output: Any, d_primary: int) -> LeafTokeniser:
    """Tokeniser for a builder output (anything with graph, n_slots, slot_index)."""
    leaves = output.graph.leaves
    return leaf_tokeniser({leaf: output.slot_index(leaf) for leaf in leaves}, leaves, d_primary, output.n_slots)


# ---------- Examples and tasks ----------
@dataclass(frozen=True)
class Example:
    """One (instance, loss) draw. The loss is described by kind + target so it serializes."""

    instance: np.ndarray
    loss_kind: str
    target: Any
    num_classes: int = 0

    @property
    def loss(self) -> LossFn:
        if self.loss_kind == "squared":
            return squared_loss(self.target)
        if self.loss_kind == "softmax_xent":
            return softmax_xent_loss(int(self.target), self.num_classes)
        raise ConfigError(f"Unknown loss kind: {self.loss_kind}")

    def to_dict(self) -> Dict[str, Any]:
        target = self.target.tolist() if isinstance(self.target, np.ndarray) else self.target
        return {
            "instance": self.instance.tolist(),
            "loss": self.loss_kind,
            "target": target,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Example":
        target = raw["target"]
        if raw["loss"] == "squared":
            target = np.asarray(target, dtype=np.float64)
        return cls(
            instance=np.asarray(raw["instance"], dtype=np.float64),
            loss_kind=raw["loss"],
            target=target,
            num_classes=int(raw.get("num_classes", 0)),
        )


@dataclass
class TaskSpec:
    name: str
    n_tokens: int
    d_primary: int
    output_dim: int
    sampler: Callable[[np.random.Generator], Example]
    tokeniser: Tokeniser
    fixed: Optional[List[Example]] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def draw(self, seed: int | Sequence[int]) -> Example:
        """One draw from the task distribution; a pure function of the seed."""
        return self.sampler(make_rng(seed))

    def tokens(self, example: Example) -> np.ndarray:
        return self.tokeniser(example.instance)

    def training_set(self, size: int, seed: int | Sequence[int]) -> List[Example]:
        if self.fixed is not None:
            return list(self.fixed)
        return [self.draw((*np.atleast_1d(seed).tolist(), i)) for i in range(size)]


def parity_label(bits: Sequence[float]) -> int:
    """Sign of the product of +-1 bits."""
    return -1 if sum(1 for b in bits if b < 0) % 2 else 1


def _parity_instance(bits: np.ndarray, d_primary: int) -> np.ndarray:
    tokens = np.zeros((bits.size, d_primary))
    tokens[:, 0] = bits
    for i in range(bits.size):
        tokens[i, 1 + i] = 1.0
    return tokens.ravel()


def make_task(
    name: str,
    params: Mapping[str, Any],
    seed: int,
    d_primary: int,
    tokeniser: Optional[Tokeniser] = None,
) -> TaskSpec:
    """
    Supported tasks:
      - token_sum_regression: n tokens uniform in [-1, 1]^d_P, target the
        first `output_dim` components of their sum, squared loss.
      - parity_classification: n +-1 bits in component 0 of each token with a
        one-hot position tag in components 1..n (so d_P >= n + 1); 2 classes, class 0
        for an even number of -1 bits.
      - memorize_k: k fixed random instances with fixed random targets, drawn
        uniformly, squared loss.
    """
    params = dict(params)
    n = int(params.get("n", 0))
    if n < 1:
        raise ConfigError(f"Task '{name}' needs a positive token count 'n'")
    tok = tokeniser if tokeniser is not None else partition_tokeniser(d_primary, n)

    if name == "token_sum_regression":
        output_dim = int(params.get("output_dim", d_primary))
        if not 1 <= output_dim <= d_primary:
            raise ConfigError(f"output_dim must lie in [1, {d_primary}], got {output_dim}")

        def sample(rng: np.random.Generator) -> Example:
            tokens = rng.uniform(-1.0, 1.0, size=(n, d_primary))
            return Example(tokens.ravel(), "squared", tokens.sum(axis=0)[:output_dim])

        return TaskSpec(name, n, d_primary, output_dim, sample, tok, params=params)

    if name == "parity_classification":
        if d_primary < n + 1:
            raise ConfigError(
                f"parity_classification needs d_P >= n + 1 = {n + 1} for distinct position tags, got {d_primary}"
            )

        def sample(rng: np.random.Generator) -> Example:
            bits = rng.choice(np.array([-1.0, 1.0]), size=n)
            label = parity_label(bits)
            return Example(_parity_instance(bits, d_primary), "softmax_xent", 0 if label > 0 else 1, 2)

        return TaskSpec(name, n, d_primary, 2, sample, tok, params=params)

    if name == "memorize_k":
        k = int(params.get("k", 4))
        output_dim = int(params.get("output_dim", 1))
        if k < 1 or output_dim < 1:
            raise ConfigError(f"memorize_k needs k >= 1 and output_dim >= 1, got {k}, {output_dim}")
        rng = make_rng(seed, stable_hash("memorize_k"))
        fixed = [
            Example(rng.uniform(-1.0, 1.0, n * d_primary), "squared", rng.uniform(-1.0, 1.0, output_dim))
            for _ in range(k)
        ]

        def sample(draw_rng: np.random.Generator) -> Example:
            return fixed[int(draw_rng.integers(k))]

        return TaskSpec(name, n, d_primary, output_dim, sample, tok, fixed=fixed, params=params)

    raise ConfigError(f"Unknown task: {name} (expected one of {', '.join(TASK_NAMES)})")


# ---------- Training-set files ----------
def export_training_set(examples: Sequence[Example], path: str | Path, task_name: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"task": task_name, "examples": [ex.to_dict() for ex in examples]}
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    logger.info("💾 Training set saved: %s (%d examples)", path, len(examples))
    return path


def load_training_set(path: str | Path) -> List[Example]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return [Example.from_dict(raw) for raw in payload["examples"]]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"Cannot read training set {path}: {exc}") from exc
