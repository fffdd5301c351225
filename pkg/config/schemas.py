"""Pydantic models for exnet run configurations (JSON files under configs/)."""
from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    D_COMPLEMENTARY,
    D_PRIMARY,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    HIDDEN_ACTIVATION,
    HIDDEN_WIDTH,
    MAX_TRAINING_SET,
    OUTPUT_ACTIVATION,
    OUTPUT_DIR,
    SCHEMA_VERSION,
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BuilderConfig(_Strict):
    """Which exnet family to build and its parameters."""

    name: Literal["sequence_tree", "image", "multilayer", "attention", "random", "dag"] = Field(
        ..., description="Builder name."
    )
    params: Dict[str, Any] = Field(default_factory=dict, description="Keyword arguments of the builder.")
    supernode_width: Optional[int] = Field(
        None, ge=1, description="Replace every vertex by a supernode of this width."
    )


class TaskConfig(_Strict):
    name: Literal["token_sum_regression", "parity_classification", "memorize_k"]
    params: Dict[str, Any] = Field(default_factory=dict, description="Task parameters (n, k, output_dim).")


class DimsConfig(_Strict):
    """Extraction sizes and MLP shapes shared by F, G and T."""

    d_primary: int = Field(D_PRIMARY, ge=1, description="Primary extraction dimension d_P.")
    d_complementary: int = Field(D_COMPLEMENTARY, ge=1, description="Complementary extraction dimension d_C.")
    hidden: List[int] = Field(default_factory=lambda: [HIDDEN_WIDTH], description="Hidden layer widths.")
    activation: Literal["tanh", "relu"] = HIDDEN_ACTIVATION
    extraction_activation: Literal["tanh", "relu", "identity"] = Field(
        OUTPUT_ACTIVATION, description="Output activation of F and G."
    )

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(w < 1 for w in value):
            raise ValueError(f"Hidden widths must be >= 1, got {value}")
        return value


class OptimizerConfig(_Strict):
    kind: Literal["sgd", "adam"] = "adam"
    lr: float = Field(1e-3, ge=0, description="Learning rate η.")
    beta1: float = Field(ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(ADAM_EPS, gt=0)
    schedule: Literal["constant", "cosine"] = Field(
        "constant", description="Rate schedule: constant, or cosine anneal over a run (train) or an epoch (train-a)."
    )
    lr_min: float = Field(0.0, ge=0, description="Final rate of the cosine anneal.")


class TrainConfig(_Strict):
    mode: Literal["SM", "DM"] = "DM"
    trials: int = Field(1000, ge=0)
    batch_size: int = Field(1, ge=1, description="Trials whose gradients are averaged per update.")
    log_every: int = Field(1000, ge=0)
    flush_every: int = Field(100, ge=1, description="Metrics rows buffered before a write.")


class XPropAConfig(_Strict):
    aeons: int = Field(3, ge=0)
    epoch_trials: int = Field(200, ge=0)
    epoch_growth: float = Field(1.0, ge=1.0, description="Epoch length multiplier from one aeon to the next.")
    training_set_size: int = Field(64, ge=1, description="Draws used when the task has no fixed set.")
    max_training_set: int = Field(MAX_TRAINING_SET, ge=1)
    training_set_path: Optional[str] = Field(
        None, description="JSON training set written by an earlier train-a run; replaces the task draws."
    )
    heldout_draws: int = Field(32, ge=0)
    spill_tables: bool = True


class SeedsConfig(_Strict):
    init: int = 0
    task: int = 1
    sm: int = 2


class OutputConfig(_Strict):
    dir: str = Field(OUTPUT_DIR, description="Directory for metrics, checkpoints and reports.")
    checkpoint: bool = True


class GradcheckConfig(_Strict):
    modes: List[Literal["SM", "DM"]] = Field(default_factory=lambda: ["SM", "DM"])
    draws: int = Field(2, ge=1)
    step: float = Field(GRADCHECK_STEP, gt=0)
    tolerance: float = Field(GRADCHECK_TOLERANCE, gt=0)


class RunConfig(_Strict):
    """Everything a command needs; validated before any work starts."""

    schema_version: int = SCHEMA_VERSION
    name: str = "run"
    builder: BuilderConfig
    task: TaskConfig
    dims: DimsConfig = Field(default_factory=DimsConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    xprop_a: XPropAConfig = Field(default_factory=XPropAConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"Unsupported schema_version {value} (expected {SCHEMA_VERSION})")
        return value

    @model_validator(mode="after")
    def _cross_check(self) -> "RunConfig":
        from src.builders import slot_count

        try:
            slots = slot_count(self.builder.name, self.builder.params)
        except KeyError as exc:
            raise ValueError(f"builder '{self.builder.name}' is missing parameter {exc}") from None
        tokens = self.task.params.get("n")
        if tokens is None:
            raise ValueError("task.params.n (token count) is required")
        if int(tokens) != slots:
            raise ValueError(
                f"leaf-count mismatch: builder '{self.builder.name}' has {slots} token slots, "
                f"task '{self.task.name}' has n={tokens}"
            )
        if self.task.name == "parity_classification" and self.dims.d_primary < int(tokens) + 1:
            raise ValueError(
                f"parity_classification needs d_primary >= n + 1 = {int(tokens) + 1} for distinct position tags"
            )
        if self.xprop_a.training_set_size > self.xprop_a.max_training_set:
            raise ValueError(
                f"training_set_size {self.xprop_a.training_set_size} exceeds cap {self.xprop_a.max_training_set}"
            )
        k = int(self.task.params.get("k", 0)) if self.task.name == "memorize_k" else 0
        if k > self.xprop_a.max_training_set:
            raise ValueError(f"memorize_k k={k} exceeds training-set cap {self.xprop_a.max_training_set}")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with seeds replaced by seed, seed+1, seed+2."""
        return self.model_copy(update={"seeds": SeedsConfig(init=seed, task=seed + 1, sm=seed + 2)})
