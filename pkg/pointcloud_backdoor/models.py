"""Pydantic models for configuration, reports, manifests and on-disk metadata."""

import math
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# =============================================================================
# Shared Literals
# =============================================================================

ClassifierArch = Literal["pointnet_mini", "edgeconv_mini"]
ResidualMode = Literal["sum", "mean"]
GeneratorVariant = Literal["morph", "folding"]
TargetSampling = Literal["random", "all"]
AttackKind = Literal["morphnet", "static", "universal", "universal_den"]
AugmentMode = Literal["none", "rotation", "translation", "both"]
SweepAxis = Literal["depth", "lambda", "alpha", "theta"]

SHAPE_FAMILIES: tuple[str, ...] = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "disc",
    "pyramid",
    "helix",
)


class ConfigModel(BaseModel):
    """Base for every configuration section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# =============================================================================
# Geometry and Dataset Configuration
# =============================================================================


class DatasetSpec(ConfigModel):
    """Synthetic corpus description.

    Family names are checked at generation time so that an unknown family is
    reported as a configuration error by the generator itself.
    """

    families: list[str] = Field(default_factory=lambda: list(SHAPE_FAMILIES))
    samples_per_class: int = Field(500, ge=1)
    test_per_class: int = Field(100, ge=1)
    num_points: int = Field(256, ge=1)
    noise_sigma: float = Field(0.01, ge=0.0)


class OutlierParams(ConfigModel):
    """Neighbourhood size k and top-m count for the outlier score.

    ``m`` defaults to ``max(4, round(0.0146 * N))``, which keeps the 30/2048
    ratio used at full scale.
    """

    k: int = Field(3, ge=1)
    m: Optional[int] = Field(None, ge=1)

    def resolve_m(self, num_points: int) -> int:
        if self.m is not None:
            return self.m
        return min(num_points, max(4, int(math.floor(0.0146 * num_points + 0.5))))


class SorParams(ConfigModel):
    """Statistical outlier removal parameters."""

    k: int = Field(2, ge=1)
    alpha: float = Field(1.1, gt=0.0)


# =============================================================================
# Classifier Training
# =============================================================================


class AugmentSwitches(ConfigModel):
    """Training-time augmentations applied per batch."""

    rotate24: bool = False
    scale_jitter: bool = False

    @property
    def enabled(self) -> bool:
        return self.rotate24 or self.scale_jitter

    @classmethod
    def from_mode(cls, mode: AugmentMode) -> "AugmentSwitches":
        return cls(
            rotate24=mode in ("rotation", "both"),
            scale_jitter=mode in ("translation", "both"),
        )


class TrainConfig(ConfigModel):
    """Classifier training schedule (victim, clean reference, transfer victim)."""

    optimizer: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(60, ge=0)
    lr_milestones: list[int] = Field(default_factory=lambda: [40, 50])
    lr_gamma: float = Field(0.1, gt=0.0)
    grad_clip_norm: Optional[float] = Field(5.0, gt=0.0)
    seed: int = 0
    augment: AugmentSwitches = Field(default_factory=AugmentSwitches)


class ClassifierConfig(ConfigModel):
    arch: ClassifierArch = "pointnet_mini"
    train: TrainConfig = Field(default_factory=TrainConfig)


class TransferConfig(ConfigModel):
    arch: ClassifierArch = "edgeconv_mini"


# =============================================================================
# Generator and Generator Training
# =============================================================================


class MorphNetConfig(ConfigModel):
    """Generator architecture switches."""

    n_blocks: int = Field(2, ge=1)
    residual_mode: ResidualMode = "mean"
    variant: GeneratorVariant = "morph"
    knn_k: int = Field(8, ge=1)
    grid_seed: int = 0


class LossWeights(ConfigModel):
    """Weights of the reconstruction (lambda) and denoising (theta) terms."""

    lambda_: float = Field(0.05, ge=0.0, alias="lambda")
    theta: float = Field(0.02, ge=0.0)


class MorphTrainConfig(ConfigModel):
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(40, ge=0)
    target_sampling: TargetSampling = "random"
    seed: int = 0
    weights: LossWeights = Field(default_factory=LossWeights)
    outlier: OutlierParams = Field(default_factory=OutlierParams)
    grad_clip_norm: Optional[float] = Field(None, gt=0.0)


# =============================================================================
# Attack, Baselines and Defenses
# =============================================================================


class PoisonConfig(ConfigModel):
    """Per-class clean-label injection (alpha in percent)."""

    alpha: float = Field(30.0, ge=0.0, le=100.0)
    target_classes: Optional[list[int]] = None
    seed: int = 0
    batch_size: int = Field(64, ge=1)


class EvaluationConfig(ConfigModel):
    sor: SorParams = Field(default_factory=SorParams)
    exclude_target: bool = True
    batch_size: int = Field(64, ge=1)
    outlier: OutlierParams = Field(default_factory=OutlierParams)


class StaticTriggerSpec(ConfigModel):
    """Line trigger: num_points evenly spaced from the origin along direction."""

    num_points: int = Field(20, ge=1)
    direction: tuple[float, float, float] = (
        1.0 / math.sqrt(3.0),
        1.0 / math.sqrt(3.0),
        1.0 / math.sqrt(3.0),
    )
    extent: float = Field(1.2, gt=0.0)

    @field_validator("direction")
    @classmethod
    def _unit_direction(
        cls, value: tuple[float, float, float]
    ) -> tuple[float, float, float]:
        norm = math.sqrt(sum(v * v for v in value))
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("direction must be a non-zero finite vector")
        return (value[0] / norm, value[1] / norm, value[2] / norm)


class PGDConfig(ConfigModel):
    eps: float = Field(0.05, ge=0.0)
    steps: int = Field(10, ge=0)
    step_size: float = Field(0.01, ge=0.0)


class UniversalTriggerConfig(ConfigModel):
    num_points: int = Field(20, ge=1)
    steps: int = Field(200, ge=0)
    learning_rate: float = Field(0.01, gt=0.0)
    batch_size: int = Field(32, ge=1)
    theta: float = Field(0.02, ge=0.0)
    outlier: OutlierParams = Field(default_factory=OutlierParams)
    seed: int = 0


class BaselineConfig(ConfigModel):
    static: StaticTriggerSpec = Field(default_factory=StaticTriggerSpec)
    pgd: PGDConfig = Field(default_factory=PGDConfig)
    universal: UniversalTriggerConfig = Field(default_factory=UniversalTriggerConfig)
    target_classes: Optional[list[int]] = None


class CleanseConfig(ConfigModel):
    """Reverse-trigger search: additive offset field with L1 weight gamma."""

    gamma: float = Field(0.01, ge=0.0)
    steps: int = Field(100, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    batch_size: int = Field(32, ge=1)
    max_samples: int = Field(256, ge=1)
    seed: int = 0


class DefenseConfig(ConfigModel):
    cleanse: CleanseConfig = Field(default_factory=CleanseConfig)
    spectral_classes: Optional[list[int]] = None
    augment_modes: list[AugmentMode] = Field(
        default_factory=lambda: ["rotation", "translation", "both"]
    )


class SweepConfig(ConfigModel):
    stack_depths: list[int] = Field(default_factory=lambda: [1, 2, 3])
    include_folding_ablation: bool = True
    lambdas: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.02, 0.01])
    alphas: list[float] = Field(default_factory=lambda: [10.0, 20.0, 30.0, 40.0, 50.0])
    thetas: list[float] = Field(default_factory=lambda: [0.0, 0.02])


class StageSeeds(ConfigModel):
    data: int = 0
    clean: int = 1
    morphnet: int = 2
    poison: int = 3
    victim: int = 4
    baseline: int = 5
    defense: int = 6

    @classmethod
    def from_base(cls, base: int) -> "StageSeeds":
        names = list(cls.model_fields)
        return cls(**{name: base + offset for offset, name in enumerate(names)})


class ExperimentConfig(ConfigModel):
    """Full experiment bundle.

    The ``seeds`` section is authoritative: after validation every stage
    section carries its stage seed.
    """

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    clean_model: ClassifierConfig = Field(default_factory=ClassifierConfig)
    victim: ClassifierConfig = Field(default_factory=ClassifierConfig)
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    morphnet: MorphNetConfig = Field(default_factory=MorphNetConfig)
    morph_train: MorphTrainConfig = Field(default_factory=MorphTrainConfig)
    poison: PoisonConfig = Field(default_factory=PoisonConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    defenses: DefenseConfig = Field(default_factory=DefenseConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    seeds: StageSeeds = Field(default_factory=StageSeeds)
    output_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def _stamp_stage_seeds(self) -> "ExperimentConfig":
        self.clean_model.train.seed = self.seeds.clean
        self.victim.train.seed = self.seeds.victim
        self.morph_train.seed = self.seeds.morphnet
        self.poison.seed = self.seeds.poison
        self.baselines.universal.seed = self.seeds.baseline
        self.defenses.cleanse.seed = self.seeds.defense
        return self


# =============================================================================
# Training Histories
# =============================================================================


class EpochRecord(BaseModel):
    """One epoch of classifier training."""

    epoch: int
    loss: float
    accuracy: float
    learning_rate: float
    wall_time: float


class MorphEpochRecord(BaseModel):
    """One epoch of generator training, with the loss decomposition."""

    epoch: int
    loss_cls: float
    loss_rec: float
    loss_den: float
    total: float
    wall_time: float


# =============================================================================
# Reports
# =============================================================================


class ClassAttackResult(BaseModel):
    target: int
    asr: float = Field(ge=0.0, le=100.0)
    asr_defended: float = Field(ge=0.0, le=100.0)
    eligible: int = Field(ge=0)


class ReconstructionStats(BaseModel):
    """Distance between benign test clouds and their poisoned versions."""

    chamfer_mean: float = 0.0
    chamfer_per_point: float = 0.0
    outlier_score_mean: float = 0.0
    samples: int = 0


class Provenance(BaseModel):
    seeds: dict[str, int] = Field(default_factory=dict)
    configs: dict[str, Any] = Field(default_factory=dict)
    checkpoints: dict[str, str] = Field(default_factory=dict)


class AttackReport(BaseModel):
    """Evaluation of one attack against one victim."""

    kind: AttackKind
    victim_arch: str
    source_arch: str
    target_classes: list[int]
    per_class: list[ClassAttackResult]
    masr: float = Field(ge=0.0, le=100.0)
    masr_defended: float = Field(ge=0.0, le=100.0)
    victim_clean_accuracy: float = Field(ge=0.0, le=100.0)
    reference_clean_accuracy: float = Field(ge=0.0, le=100.0)
    accuracy_delta: float
    reconstruction: ReconstructionStats = Field(default_factory=ReconstructionStats)
    provenance: Provenance = Field(default_factory=Provenance)

    @model_validator(mode="after")
    def _check_means(self) -> "AttackReport":
        if self.per_class:
            expected = sum(r.asr for r in self.per_class) / len(self.per_class)
            if abs(expected - self.masr) > 1e-6:
                raise ValueError(
                    f"masr {self.masr} is not the mean of per-class ASR {expected}"
                )
        return self

    @classmethod
    def from_results(
        cls,
        kind: AttackKind,
        victim_arch: str,
        source_arch: str,
        per_class: list[ClassAttackResult],
        victim_accuracy: float,
        reference_accuracy: float,
        reconstruction: Optional[ReconstructionStats] = None,
        provenance: Optional[Provenance] = None,
    ) -> "AttackReport":
        """Build a report, deriving the means and the accuracy delta."""
        count = max(len(per_class), 1)
        return cls(
            kind=kind,
            victim_arch=victim_arch,
            source_arch=source_arch,
            target_classes=[r.target for r in per_class],
            per_class=per_class,
            masr=sum(r.asr for r in per_class) / count,
            masr_defended=sum(r.asr_defended for r in per_class) / count,
            victim_clean_accuracy=victim_accuracy,
            reference_clean_accuracy=reference_accuracy,
            accuracy_delta=victim_accuracy - reference_accuracy,
            reconstruction=reconstruction or ReconstructionStats(),
            provenance=provenance or Provenance(),
        )


class UniversalTrigger(BaseModel):
    """Optimised trigger points for one target class, stored for exact replay."""

    target: int = Field(ge=0)
    points: list[tuple[float, float, float]]
    with_den: bool = False
    seed: int = 0
    config: UniversalTriggerConfig = Field(default_factory=UniversalTriggerConfig)

    @field_validator("points")
    @classmethod
    def _finite(
        cls, value: list[tuple[float, float, float]]
    ) -> list[tuple[float, float, float]]:
        if not value:
            raise ValueError("trigger needs at least one point")
        if not all(math.isfinite(c) for p in value for c in p):
            raise ValueError("trigger coordinates must be finite")
        return value


class ClassScanResult(BaseModel):
    target: int
    records: int
    poisoned: int
    candidates: int
    proportion: float = Field(ge=0.0, le=100.0)


class SpectralScanResult(BaseModel):
    """Share of true poisons among the top-50% spectral candidates, per class."""

    per_class: list[ClassScanResult]
    mean_proportion: float
    min_proportion: float
    max_proportion: float

    @classmethod
    def from_classes(cls, per_class: list[ClassScanResult]) -> "SpectralScanResult":
        values = [r.proportion for r in per_class] or [0.0]
        return cls(
            per_class=per_class,
            mean_proportion=sum(values) / len(values),
            min_proportion=min(values),
            max_proportion=max(values),
        )


class CleanseResult(BaseModel):
    """Reverse-engineered trigger norms and the MAD-based verdict."""

    norms: list[float]
    anomaly_index: float = Field(ge=0.0)
    infected: bool
    flagged_classes: list[int] = Field(default_factory=list)
    per_class_anomaly: list[float] = Field(default_factory=list)
    norm_quartiles: dict[str, float] = Field(default_factory=dict)

    @field_validator("norms")
    @classmethod
    def _non_negative(cls, value: list[float]) -> list[float]:
        if any(v < 0 for v in value):
            raise ValueError("trigger norms must be non-negative")
        return value


class CleanseReport(BaseModel):
    """Neural Cleanse verdicts for the poisoned victim and its benign twin."""

    victim: CleanseResult
    reference: CleanseResult


class SweepPoint(BaseModel):
    """Identifies one configuration of an ablation sweep."""

    axis: SweepAxis
    label: str
    value: float
    n_blocks: int
    variant: GeneratorVariant = "morph"


# =============================================================================
# On-disk Metadata
# =============================================================================


class DatasetMeta(BaseModel):
    format_version: str = "1.0"
    split: Literal["train", "test"]
    num_points: int
    num_classes: int
    records: int
    counts: list[int]
    families: list[str]
    seed: Optional[int] = None
    source: str = "synthetic"


class PoisonFlags(BaseModel):
    poisoned: list[bool]
    condition_class: list[Optional[int]]


class TensorLayout(BaseModel):
    name: str
    shape: list[int]
    offset: int
    count: int


class CheckpointMeta(BaseModel):
    format_version: str = "1.0"
    kind: Literal["classifier", "morphnet"]
    arch: str
    num_classes: int
    num_points: int
    seed: int = 0
    epoch: int = 0
    residual_mode: Optional[ResidualMode] = None
    n_blocks: Optional[int] = None
    grid_seed: Optional[int] = None
    variant: Optional[GeneratorVariant] = None
    knn_k: Optional[int] = None
    layout: list[TensorLayout] = Field(default_factory=list)


class RunManifest(BaseModel):
    """Record of one completed stage."""

    stage: str
    tool_version: str
    input_hash: str
    config: dict[str, Any] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    timings: dict[str, float] = Field(default_factory=dict)
    started_at: str
    completed_at: str


__all__ = [
    "SHAPE_FAMILIES",
    "AttackKind",
    "AttackReport",
    "AugmentMode",
    "AugmentSwitches",
    "BaselineConfig",
    "CheckpointMeta",
    "ClassAttackResult",
    "ClassScanResult",
    "ClassifierArch",
    "ClassifierConfig",
    "CleanseConfig",
    "CleanseReport",
    "CleanseResult",
    "ConfigModel",
    "DatasetMeta",
    "DatasetSpec",
    "DefenseConfig",
    "EpochRecord",
    "EvaluationConfig",
    "ExperimentConfig",
    "GeneratorVariant",
    "LossWeights",
    "MorphEpochRecord",
    "MorphNetConfig",
    "MorphTrainConfig",
    "OutlierParams",
    "PGDConfig",
    "PoisonConfig",
    "PoisonFlags",
    "Provenance",
    "ReconstructionStats",
    "ResidualMode",
    "RunManifest",
    "SorParams",
    "SpectralScanResult",
    "StageSeeds",
    "StaticTriggerSpec",
    "SweepAxis",
    "SweepConfig",
    "SweepPoint",
    "TargetSampling",
    "TensorLayout",
    "TrainConfig",
    "TransferConfig",
    "UniversalTrigger",
    "UniversalTriggerConfig",
]
