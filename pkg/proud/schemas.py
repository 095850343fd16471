"""
Pydantic schemas for configuration and experiment reports
Compatible with Pydantic v2 (uses ConfigDict / field validators)
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

VARIANTS = ("proud", "no_udmix", "no_pml", "erm_labeled_only", "naive_pseudo", "domain_agnostic")
Variant = Literal["proud", "no_udmix", "no_pml", "erm_labeled_only", "naive_pseudo", "domain_agnostic"]


def _split_csv(value: Any) -> Any:
    """'0, 15, 30' -> ['0', '15', '30'] so flat config values can hold lists."""
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


# ------------------------------------------------------------------ #
#  DATA GENERATION
# ------------------------------------------------------------------ #
class GeneratorConfig(BaseModel):
    num_classes: int = Field(4, ge=2)
    input_dim: int = Field(16, ge=3)
    n_per_domain: int = Field(600, ge=1)
    class_separation: float = Field(3.0, gt=0)
    domain_rotation_degrees: List[float] = [0.0, 15.0, 30.0, 45.0]
    domain_translation: List[float] = [0.0, 0.25, 0.5, 0.75]
    noise_sigma: float = Field(1.0, gt=0)
    spurious_strength: float = Field(1.0, ge=0)
    seed: int = 0

    model_config = ConfigDict(extra="forbid")

    @field_validator("domain_rotation_degrees", "domain_translation", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_domains(self) -> "GeneratorConfig":
        if len(self.domain_translation) != len(self.domain_rotation_degrees):
            raise ValueError("domain_translation and domain_rotation_degrees must have equal length")
        if not self.domain_rotation_degrees:
            raise ValueError("at least one domain is required")
        return self

    @property
    def n_domains(self) -> int:
        return len(self.domain_rotation_degrees)


# ------------------------------------------------------------------ #
#  MODEL & PRETRAINING
# ------------------------------------------------------------------ #
class ModelDims(BaseModel):
    hidden: List[int] = [64, 64]
    feature_dim: int = Field(16, ge=1)

    model_config = ConfigDict(extra="forbid")

    @field_validator("hidden", mode="before")
    @classmethod
    def split_hidden(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("hidden")
    @classmethod
    def positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w <= 0 for w in widths):
            raise ValueError("hidden widths must be positive")
        return widths


class PretrainConfig(BaseModel):
    epochs: int = Field(50, ge=0)
    lr: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(64, ge=1)
    early_stop_patience: int = Field(10, ge=1)

    model_config = ConfigDict(extra="forbid")


# ------------------------------------------------------------------ #
#  PROUD HYPERPARAMETERS
# ------------------------------------------------------------------ #
class ProudHyper(BaseModel):
    alpha: float = Field(1.0, ge=0)  # weight of the prototype merging loss
    tau_eps: float = Field(0.1, gt=0)  # uncertainty temperature
    tau_lambda: float = Field(0.1, gt=0)  # mixing temperature
    lambda_star: float = Field(0.4, gt=0, le=0.5)
    ensemble_size: int = Field(3, ge=1)
    augment_strength: float = Field(0.5, ge=0)
    augment_noise_sigma: Optional[float] = Field(None, gt=0)  # None = the suite's noise_sigma
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(80, ge=0)
    lr: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    mixup_alpha: float = Field(0.2, gt=0)
    soft_mixup_targets: bool = True
    mixing: Literal["uncertainty", "uniform", "fixed"] = "uncertainty"
    fixed_lambda: float = Field(1.0, ge=0, le=1)
    pml_reduction: Literal["mean", "sum"] = "mean"
    anchors_include_labeled: bool = True
    domain_aware: bool = True

    model_config = ConfigDict(extra="forbid")


# ------------------------------------------------------------------ #
#  EXPERIMENT CONFIG
# ------------------------------------------------------------------ #
class ExperimentConfig(BaseSettings):
    """Everything one run, matrix or ablation needs; PROUD_* env vars fill unset fields."""

    generator: GeneratorConfig = GeneratorConfig()
    dataset_path: Optional[Path] = None
    model: ModelDims = ModelDims()
    pretrain: PretrainConfig = PretrainConfig()
    proud: ProudHyper = ProudHyper()
    seeds: List[int] = [2022, 2023, 2024]
    variant: Variant = "proud"
    labeled: Optional[int] = None  # None = all combinations
    test: Optional[int] = None
    split_ratio: Tuple[float, float] = (0.9, 0.1)
    score_window: int = Field(5, ge=1)
    workers: int = Field(1, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="PROUD_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    @field_validator("seeds", "split_ratio", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)

    @field_validator("labeled", "test", mode="before")
    @classmethod
    def all_means_none(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("all", ""):
            return None
        return value

    @field_validator("seeds")
    @classmethod
    def seeds_non_empty(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("seeds must not be empty")
        return seeds

    @field_validator("split_ratio")
    @classmethod
    def ratio_is_partition(cls, ratio: Tuple[float, float]) -> Tuple[float, float]:
        if min(ratio) <= 0 or abs(sum(ratio) - 1.0) > 1e-9:
            raise ValueError("split_ratio fractions must be positive and sum to 1")
        return ratio

    @model_validator(mode="after")
    def check_combination(self) -> "ExperimentConfig":
        if (self.labeled is None) != (self.test is None):
            raise ValueError("labeled and test must be given together (or both 'all')")
        if self.labeled is not None and self.labeled == self.test:
            raise ValueError(
                "labeled and test domain must differ: training and test domains are disjoint"
            )
        return self

    def combinations(self, n_domains: int) -> List[Tuple[int, int]]:
        if self.labeled is not None:
            return [(self.labeled, self.test)]
        return [(l, t) for l in range(n_domains) for t in range(n_domains) if l != t]


# ------------------------------------------------------------------ #
#  REPORTS
# ------------------------------------------------------------------ #
class PretrainEpoch(BaseModel):
    epoch: int
    train_loss: float
    val_acc: float


class EpochRecord(BaseModel):
    """One epoch of a run; dict keys are unlabeled role positions 1..T."""
    epoch: int
    test_acc: float
    pl_acc: Dict[int, float] = {}
    mean_lambda: Dict[int, float] = {}
    loss_ce: float
    loss_pml: float = 0.0
    prototype_spread: Optional[float] = None


class RunReport(BaseModel):
    variant: str
    labeled: int
    test: int
    unlabeled: List[int]
    seed: int
    history: List[EpochRecord] = []
    pretrain_history: List[PretrainEpoch] = []
    final_score: float = Field(ge=0, le=1)
    wall_seconds: float
    fingerprint: str
    code_version: str
    embeddings: Optional[Any] = Field(default=None, exclude=True)

    model_config = ConfigDict(arbitrary_types_allowed=True)


class CombinationSummary(BaseModel):
    labeled: int
    test: int
    scores: List[float]
    mean: float


class MatrixReport(BaseModel):
    variant: str
    score_window: int
    runs: List[RunReport] = []
    combinations: List[CombinationSummary] = []
    avg: float
    std: float


class VariantDiff(BaseModel):
    avg: float
    std: float


class AblationReport(BaseModel):
    matrices: Dict[str, MatrixReport]
    diffs: Dict[str, VariantDiff] = {}


class AblationOut(BaseModel):
    """ablation.json: variants in run order (the first is the reference) and their diffs."""
    variants: List[str]
    diffs: Dict[str, VariantDiff] = {}


# ------------------------------------------------------------------ #
#  SUMMARY FILE (summary.json)
# ------------------------------------------------------------------ #
class RunSummaryOut(BaseModel):
    labeled: int
    test: int
    seed: int
    final_score: float
    wall_seconds: float
    fingerprint: str


class ReferenceRow(BaseModel):
    """Full-scale reference shown next to desk-scale numbers; never a target."""
    dataset: str = "PACS"
    avg: float = 75.1
    std: float = 8.0


class SummaryOut(BaseModel):
    variant: str
    avg: float
    std: float
    score_window: int
    code_version: str
    combinations: List[CombinationSummary]
    runs: List[RunSummaryOut]
    reference: ReferenceRow = ReferenceRow()
