"""Small fully-connected networks (F, G, T), parameter stores with sharing, optimizers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Sequence, Tuple

import numpy as np

from config.settings import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    CHECKPOINT_FORMAT_VERSION,
    HIDDEN_ACTIVATION,
    HIDDEN_WIDTH,
    OUTPUT_ACTIVATION,
)
from src.builders import ShareScheme
from src.errors import ConfigError, DimensionError, NonFiniteGradientError
from src.graph import ArcId, ExnetGraph, VertexId
from src.utils import all_finite, get_logger, make_rng, seed_sequence, stable_hash

logger = get_logger(__name__)

Activation = Literal["tanh", "relu", "identity"]
ACTIVATIONS = ("tanh", "relu", "identity")

PP, CP, TR = "pp", "cp", "tr"
ROLES = (PP, CP, TR)

ParamKey = Tuple[str, str]


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes and activations of one network role."""

    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    activation: Activation = HIDDEN_ACTIVATION
    output_activation: Activation = OUTPUT_ACTIVATION

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ConfigError(f"All layer sizes must be >= 1, got {dims}")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ConfigError(f"Unknown activation: {name}")
        if self.hidden_dims and self.activation == "identity":
            raise ConfigError("'identity' is only allowed as the final-layer activation.")

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def layout(self) -> List[Tuple[int, int, int]]:
        """(fan_in, fan_out, offset) per layer; weights row-major then biases."""
        out, offset = [], 0
        dims = self.dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            out.append((fan_in, fan_out, offset))
            offset += (fan_in + 1) * fan_out
        return out

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out, _ in self.layout)

    def layer_activation(self, index: int) -> str:
        return self.output_activation if index == len(self.hidden_dims) else self.activation


# ---------- Initialization / evaluation ----------
def init_params(spec: MlpSpec, seed: int | Sequence[int]) -> np.ndarray:
    """
    Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    Deterministic per seed.
    """
    rng = make_rng(seed)
    params = np.zeros(spec.n_params, dtype=np.float64)
    for fan_in, fan_out, offset in spec.layout:
        bound = 1.0 / np.sqrt(fan_in)
        params[offset: offset + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
    return params


def _layers(spec: MlpSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    if params.shape != (spec.n_params,):
        raise DimensionError(f"Expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    for fan_in, fan_out, offset in spec.layout:
        w_end = offset + fan_in * fan_out
        layers.append(
            (params[offset:w_end].reshape(fan_out, fan_in), params[w_end: w_end + fan_out])
        )
    return layers


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _as_vector(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DimensionError(f"{what} must have shape ({dim},), got {x.shape}")
    return x


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pure evaluation of the network on one input vector."""
    h = _as_vector(x, spec.input_dim, "Input")
    for i, (w, b) in enumerate(_layers(spec, params)):
        h = _activate(spec.layer_activation(i), w @ h + b)
    return h


def backward(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reverse-mode gradients of <upstream, forward(params, x)> with respect to
    the parameters and the input.
    """
    h = _as_vector(x, spec.input_dim, "Input")
    upstream = _as_vector(upstream, spec.output_dim, "Upstream gradient")
    layers = _layers(spec, params)

    inputs, pre, post = [], [], []
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = w @ h + b
        h = _activate(spec.layer_activation(i), z)
        pre.append(z)
        post.append(h)

    grad = np.zeros_like(params)
    delta = upstream
    for i in reversed(range(len(layers))):
        fan_in, fan_out, offset = spec.layout[i]
        w, _ = layers[i]
        dz = delta * _activation_grad(spec.layer_activation(i), pre[i], post[i])
        w_end = offset + fan_in * fan_out
        grad[offset:w_end] = np.outer(dz, inputs[i]).ravel()
        grad[w_end: w_end + fan_out] = dz
        delta = w.T @ dz
    return grad, delta


def role_specs(
    d_primary: int,
    d_complementary: int,
    output_dim: int,
    hidden: Sequence[int] = (HIDDEN_WIDTH,),
    activation: Activation = HIDDEN_ACTIVATION,
    extraction_activation: Activation = OUTPUT_ACTIVATION,
    trainer_activation: Activation = "identity",
) -> Dict[str, MlpSpec]:
    """F: 2*d_P -> d_P, G: d_C + d_P -> d_C, T: d_P + d_C -> output."""
    hidden = tuple(hidden)
    return {
        PP: MlpSpec(2 * d_primary, hidden, d_primary, activation, extraction_activation),
        CP: MlpSpec(d_complementary + d_primary, hidden, d_complementary, activation, extraction_activation),
        TR: MlpSpec(d_primary + d_complementary, hidden, output_dim, activation, trainer_activation),
    }


# ---------- Parameter store ----------
@dataclass
class NetworkBundle:
    """
    Every parameter vector of an exnet. Vertices and arcs sharing a group label
    read the same array, so an in-place update reaches all members.
    """

    graph: ExnetGraph
    sharing: ShareScheme
    specs: Dict[str, MlpSpec]
    params: Dict[ParamKey, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        graph: ExnetGraph,
        sharing: ShareScheme,
        specs: Mapping[str, MlpSpec],
        seed: int | Sequence[int],
    ) -> "NetworkBundle":
        bundle = cls(graph=graph, sharing=sharing, specs=dict(specs))
        bundle.reset(bundle.group_keys(), seed)
        return bundle

    @property
    def d_primary(self) -> int:
        return self.specs[PP].output_dim

    @property
    def d_complementary(self) -> int:
        return self.specs[CP].output_dim

    @property
    def output_dim(self) -> int:
        return self.specs[TR].output_dim

    def pp_key(self, v: VertexId) -> ParamKey:
        return (PP, self.sharing.vertex_groups[v])

    def tr_key(self, v: VertexId) -> ParamKey:
        return (TR, self.sharing.vertex_groups[v])

    def cp_key(self, a: ArcId) -> ParamKey:
        return (CP, self.sharing.arc_groups[a])

    def pp(self, v: VertexId) -> np.ndarray:
        return self.params[self.pp_key(v)]

    def tr(self, v: VertexId) -> np.ndarray:
        return self.params[self.tr_key(v)]

    def cp(self, a: ArcId) -> np.ndarray:
        return self.params[self.cp_key(a)]

    def group_keys(self) -> List[ParamKey]:
        vertex_labels = sorted(set(self.sharing.vertex_groups.values()))
        arc_labels = sorted(set(self.sharing.arc_groups.values()))
        return (
            [(PP, g) for g in vertex_labels]
            + [(TR, g) for g in vertex_labels]
            + [(CP, g) for g in arc_labels]
        )

    def zero_grads(self) -> Dict[ParamKey, np.ndarray]:
        return {key: np.zeros(self.specs[key[0]].n_params) for key in self.group_keys()}

    def reset(self, keys: Iterable[ParamKey], seed: int | Sequence[int]) -> None:
        """Draw fresh initial values for the given groups."""
        for role, label in keys:
            self.params[(role, label)] = init_params(
                self.specs[role], seed_sequence(seed, stable_hash(f"{role}:{label}"))
            )

    def copy(self) -> "NetworkBundle":
        return NetworkBundle(
            graph=self.graph,
            sharing=self.sharing,
            specs=dict(self.specs),
            params={k: v.copy() for k, v in self.params.items()},
        )

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


# ---------- Optimizers ----------
class Optimizer:
    """Per-group update rule; state is keyed by ParamKey."""

    kind = "base"

    def __init__(self, lr: float) -> None:
        self.lr = float(lr)

    def step(self, params: Dict[ParamKey, np.ndarray], grads: Mapping[ParamKey, np.ndarray]) -> None:
        raise NotImplementedError

    def reset(self, keys: Iterable[ParamKey]) -> None:
        """Forget any per-group state (used when a group is re-initialized)."""


class SGD(Optimizer):
    kind = "sgd"

    def step(self, params, grads) -> None:
        for key, g in grads.items():
            params[key] -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(
        self,
        lr: float,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> None:
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m: Dict[ParamKey, np.ndarray] = {}
        self.v: Dict[ParamKey, np.ndarray] = {}
        self.t: Dict[ParamKey, int] = {}

    def step(self, params, grads) -> None:
        b1, b2 = self.beta1, self.beta2
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * (g * g)
            m_hat = self.m[key] / (1.0 - b1 ** t)
            v_hat = self.v[key] / (1.0 - b2 ** t)
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self, keys) -> None:
        for key in keys:
            self.m.pop(key, None)
            self.v.pop(key, None)
            self.t.pop(key, None)


@dataclass(frozen=True)
class LrSchedule:
    """Per-step learning rate: constant, or a cosine anneal from the base rate down to lr_min."""

    kind: Literal["constant", "cosine"] = "constant"
    lr_min: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"Unknown learning-rate schedule: {self.kind}")
        if not self.lr_min >= 0:
            raise ConfigError(f"lr_min must be non-negative, got {self.lr_min}")

    def at(self, base: float, step: int, total: int) -> float:
        if self.kind == "constant" or total <= 1:
            return base
        progress = min(max(step, 0), total - 1) / (total - 1)
        return self.lr_min + 0.5 * (base - self.lr_min) * (1.0 + math.cos(math.pi * progress))


def make_optimizer(
    kind: str,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> Optimizer:
    if not lr >= 0:
        raise ConfigError(f"Learning rate must be non-negative, got {lr}")
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, beta1, beta2, eps)
    raise ConfigError(f"Unknown optimizer: {kind}")


def apply_update(
    store: NetworkBundle, grads: Mapping[ParamKey, np.ndarray], opt: Optimizer
) -> None:
    """
    One optimizer step on the given groups. Each group gradient is already the
    sum over the group's members. Nothing is written if any entry is non-finite.
    """
    for key, g in grads.items():
        if key not in store.params:
            raise KeyError(f"Unknown parameter group {key}")
        if g.shape != store.params[key].shape:
            raise DimensionError(
                f"Gradient for {key} has shape {g.shape}, expected {store.params[key].shape}"
            )
    if not all_finite(grads.values()):
        bad = [key for key, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteGradientError(f"Non-finite gradient in groups {bad[:5]}")
    opt.step(store.params, grads)


# ---------- Checkpoints ----------
def save_checkpoint(bundle: NetworkBundle, path: str | Path) -> Path:
    """Write every group plus layout metadata to a .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(bundle.params)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "specs": {role: asdict(spec) for role, spec in bundle.specs.items()},
        "keys": [list(k) for k in keys],
        "vertex_groups": [[v, g] for v, g in sorted(bundle.sharing.vertex_groups.items())],
        "arc_groups": [[a, g] for a, g in sorted(bundle.sharing.arc_groups.items())],
    }
    arrays = {f"p{i}": bundle.params[k] for i, k in enumerate(keys)}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    logger.info("💾 Checkpoint saved: %s (%d groups)", path, len(keys))
    return path


def load_checkpoint(path: str | Path, graph: ExnetGraph) -> NetworkBundle:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"Unsupported checkpoint version: {meta.get('format_version')}")
        specs = {
            role: MlpSpec(
                input_dim=s["input_dim"],
                hidden_dims=tuple(s["hidden_dims"]),
                output_dim=s["output_dim"],
                activation=s["activation"],
                output_activation=s["output_activation"],
            )
            for role, s in meta["specs"].items()
        }
        params = {tuple(k): data[f"p{i}"].copy() for i, k in enumerate(meta["keys"])}
    sharing = ShareScheme(
        vertex_groups={int(v): g for v, g in meta["vertex_groups"]},
        arc_groups={int(a): g for a, g in meta["arc_groups"]},
    )
    problems = sharing.problems(graph)
    if problems:
        raise ConfigError(f"Checkpoint does not match graph: {problems[0]}")
    return NetworkBundle(graph=graph, sharing=sharing, specs=specs, params=params)
