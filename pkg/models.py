from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

ModelName = Literal["baseline", "r90", "r60", "dense-baseline", "dense-r90", "dense-r60"]
DatasetName = Literal["mnist", "rot-mnist", "cifar10"]

MODEL_NAMES: List[str] = ["baseline", "r90", "r60", "dense-baseline", "dense-r90", "dense-r60"]
DATASET_NAMES: List[str] = ["mnist", "rot-mnist", "cifar10"]


class SolverConfig(BaseModel):
    lam: float = Field(default=0.5, ge=0, description="Soft-threshold level λ")
    alpha: float = Field(default=0.01, gt=0, description="Gradient step size")
    num_layers: int = Field(default=4, ge=1, description="Unrolled layers L")
    acceleration: Literal["ista", "fista"] = "fista"
    # literal: S_λ as printed in the layer update; scaled: textbook prox S_{αλ}
    threshold_mode: Literal["literal", "scaled"] = "literal"

    model_config = {"frozen": True}

    @property
    def threshold(self) -> float:
        return self.lam if self.threshold_mode == "literal" else self.alpha * self.lam

    @property
    def effective_penalty(self) -> float:
        """ℓ1 weight of the lasso whose fixed points the iteration reaches"""
        return self.threshold / self.alpha


class TrainConfig(BaseModel):
    model: ModelName
    dataset: DatasetName
    data_dir: Path = Path("data")
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    seed: int = 0
    optimizer: Literal["adam", "sgd-momentum"] = "adam"
    momentum: float = Field(default=0.9, ge=0, lt=1)
    eval_dataset: Optional[DatasetName] = Field(default=None, description="Evaluate on another dataset")
    train_limit: Optional[int] = Field(default=None, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)
    tied: bool = False
    bn_in_recurrence: bool = True
    lam: float = Field(default=0.5, ge=0)
    alpha: float = Field(default=0.01, gt=0)
    num_layers: int = Field(default=4, ge=1)
    acceleration: Literal["ista", "fista"] = "fista"
    threshold_mode: Literal["literal", "scaled"] = "literal"
    init_gain: float = Field(default=1.0, gt=0)
    power_iterations: int = Field(default=20, ge=1)
    allow_dead_start: bool = Field(default=False, description="Train on even if every first-layer code starts at zero")

    model_config = {"extra": "forbid"}

    @field_validator("model", "dataset", "eval_dataset", "optimizer", mode="before")
    def normalize_names(cls, v):
        if isinstance(v, str):
            return v.strip().lower().replace("_", "-")
        return v

    def solver(self) -> SolverConfig:
        return SolverConfig(
            lam=self.lam,
            alpha=self.alpha,
            num_layers=self.num_layers,
            acceleration=self.acceleration,
            threshold_mode=self.threshold_mode,
        )


METRICS_COLUMNS = ["epoch", "train_loss", "train_acc", "test_acc", "sparsity", "stability_margin"]


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    sparsity: float
    stability_margin: float


class EvalResult(BaseModel):
    accuracy: float
    mean_loss: float
    mean_sparsity: float
    count: int


class ParameterBreakdown(BaseModel):
    filters: int
    batchnorm: int
    head: int
    total: int
    reported_total: Optional[int] = Field(default=None, description="Published CIFAR-10 total, if any")


class Provenance(BaseModel):
    sources: List[str] = Field(default_factory=list)
    seed: Optional[int] = None
