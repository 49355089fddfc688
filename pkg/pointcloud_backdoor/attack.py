#!/usr/bin/env python3
"""Clean-label poisoning with the generator and the attack evaluation protocol."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .dataset import LabeledDataset, generate_synthetic_splits, save_dataset
from .errors import BackdoorToolkitError, ConfigurationError, InvalidInputError, StageError
from .geometry import (
    chamfer_distance,
    chamfer_per_point,
    knn_indices,
    outlier_score,
    repeat_to_size,
    sor_filter,
)
from .models import (
    AttackKind,
    AttackReport,
    ClassAttackResult,
    ClassifierArch,
    EvaluationConfig,
    ExperimentConfig,
    PoisonConfig,
    Provenance,
    ReconstructionStats,
    TrainConfig,
)
from .networks import MorphNet, model_digest, predict
from .training import ClassifierRun, accuracy, train_classifier, train_morphnet
from .utils import write_csv, write_json_atomic

logger = logging.getLogger(__name__)

PER_CLASS_COLUMNS = ["target", "asr", "asr_defended", "eligible"]
REGION_COLUMNS = ["target", "record", "region", "x", "y", "z", "score"]


# =============================================================================
# Poison Injection
# =============================================================================


@torch.no_grad()
def generate_poisoned(
    morphnet: MorphNet,
    points: Tensor,
    target: Union[int, Tensor],
    batch_size: int = 64,
) -> Tensor:
    """Final generator output for every cloud, conditioned on ``target``."""
    morphnet.eval()
    targets = torch.as_tensor(target, dtype=torch.long)
    if targets.dim() == 0:
        targets = targets.expand(points.shape[0])
    chunks = [
        morphnet(points[s : s + batch_size], targets[s : s + batch_size])[0]
        for s in range(0, points.shape[0], batch_size)
    ]
    if not chunks:
        return points.clone()
    return torch.cat(chunks)


def resolve_targets(targets: Optional[Sequence[int]], num_classes: int) -> list[int]:
    resolved = list(targets) if targets is not None else list(range(num_classes))
    for t in resolved:
        if not 0 <= t < num_classes:
            raise ConfigurationError(
                f"target class {t} out of range [0, {num_classes})", "poison.target_classes"
            )
    return resolved


def poison_count(alpha: float, class_size: int) -> int:
    """Number of records poisoned in a class of ``class_size`` at rate alpha%."""
    return int(np.floor(alpha / 100.0 * class_size + 0.5))


def select_poison_indices(
    dataset: LabeledDataset, t: int, alpha: float, rng: np.random.Generator
) -> np.ndarray:
    """Seeded uniform choice without replacement of alpha% of class t."""
    indices = dataset.class_indices(t)
    if indices.size == 0:
        raise ConfigurationError(f"class {t} has no training records", "poison.alpha")
    count = poison_count(alpha, indices.size)
    return np.sort(rng.choice(indices, size=count, replace=False))


def poison_training_set(
    morphnet: MorphNet, dataset: LabeledDataset, cfg: PoisonConfig
) -> LabeledDataset:
    """Replace alpha% of every target class by generator outputs for that class.

    Labels are never changed: each poisoned record keeps label t and records
    t as its condition class.
    """
    if dataset.split != "train":
        raise InvalidInputError("only a training split can be poisoned")
    if morphnet.num_classes != dataset.num_classes:
        raise InvalidInputError(
            f"generator has {morphnet.num_classes} classes, dataset has {dataset.num_classes}"
        )
    targets = resolve_targets(cfg.target_classes, dataset.num_classes)
    if cfg.alpha == 0:
        return dataset

    rng = np.random.default_rng(cfg.seed)
    all_indices: list[np.ndarray] = []
    all_points: list[np.ndarray] = []
    all_conditions: list[np.ndarray] = []
    for t in targets:
        chosen = select_poison_indices(dataset, t, cfg.alpha, rng)
        if chosen.size == 0:
            continue
        generated = generate_poisoned(morphnet, dataset.points_tensor(chosen), t, cfg.batch_size)
        all_indices.append(chosen)
        all_points.append(generated.numpy())
        all_conditions.append(np.full(chosen.size, t, dtype=np.int64))
        logger.info("Poisoned %d records of class %d", chosen.size, t)

    if not all_indices:
        return dataset
    return dataset.with_replaced(
        np.concatenate(all_indices),
        np.concatenate(all_points),
        np.concatenate(all_conditions),
    )


# =============================================================================
# Attack Success
# =============================================================================


def eligible_indices(test_set: LabeledDataset, t: int, exclude_target: bool = True) -> np.ndarray:
    if exclude_target:
        indices = np.flatnonzero(test_set.labels != t)
    else:
        indices = np.arange(len(test_set))
    if indices.size == 0:
        raise InvalidInputError(f"no eligible test records for target class {t}")
    return indices


@torch.no_grad()
def success_rates(
    victim: nn.Module,
    triggered: Tensor,
    t: int,
    eval_cfg: Optional[EvaluationConfig] = None,
) -> tuple[float, float]:
    """(ASR, ASR after SOR) in percent on the same triggered clouds."""
    eval_cfg = eval_cfg or EvaluationConfig()
    if triggered.shape[0] == 0:
        raise InvalidInputError("no triggered clouds to evaluate")
    preds = predict(victim, triggered, eval_cfg.batch_size)
    rate = 100.0 * float((preds == t).double().mean())

    was_training = victim.training
    victim.eval()
    hits = 0
    try:
        for cloud in triggered:
            filtered = sor_filter(cloud, eval_cfg.sor.k, eval_cfg.sor.alpha)
            filtered = repeat_to_size(filtered, cloud.shape[0])
            hits += int(victim(filtered.unsqueeze(0)).argmax(dim=-1).item() == t)
    finally:
        victim.train(was_training)
    return rate, 100.0 * hits / triggered.shape[0]


class ClassEvaluation(NamedTuple):
    result: ClassAttackResult
    benign: Tensor
    poisoned: Tensor


def attack_success(
    victim: nn.Module,
    morphnet: MorphNet,
    test_set: LabeledDataset,
    t: int,
    eval_cfg: Optional[EvaluationConfig] = None,
) -> ClassEvaluation:
    """Evaluate both ASR variants for target t on one set of generated clouds."""
    eval_cfg = eval_cfg or EvaluationConfig()
    indices = eligible_indices(test_set, t, eval_cfg.exclude_target)
    benign = test_set.points_tensor(indices)
    poisoned = generate_poisoned(morphnet, benign, t, eval_cfg.batch_size)
    rate, defended = success_rates(victim, poisoned, t, eval_cfg)
    result = ClassAttackResult(
        target=t, asr=rate, asr_defended=defended, eligible=int(indices.size)
    )
    return ClassEvaluation(result, benign, poisoned)


def asr(
    victim: nn.Module,
    morphnet: MorphNet,
    test_set: LabeledDataset,
    t: int,
    defended: bool = False,
    eval_cfg: Optional[EvaluationConfig] = None,
) -> float:
    """Percentage of eligible test clouds classified as t after poisoning."""
    result = attack_success(victim, morphnet, test_set, t, eval_cfg).result
    return result.asr_defended if defended else result.asr


def masr(
    victim: nn.Module,
    morphnet: MorphNet,
    test_set: LabeledDataset,
    defended: bool = False,
    targets: Optional[Sequence[int]] = None,
    eval_cfg: Optional[EvaluationConfig] = None,
) -> float:
    """Unweighted mean of per-class ASR over the target set."""
    classes = resolve_targets(targets, test_set.num_classes)
    rates = [asr(victim, morphnet, test_set, t, defended, eval_cfg) for t in classes]
    return float(np.mean(rates))


@torch.no_grad()
def reconstruction_stats(
    benign: Sequence[Tensor], poisoned: Sequence[Tensor], eval_cfg: EvaluationConfig
) -> ReconstructionStats:
    """Mean Chamfer (raw and per point) and mean outlier score of poisoned clouds."""
    if not benign:
        return ReconstructionStats()
    a = torch.cat(list(benign))
    b = torch.cat(list(poisoned))
    return ReconstructionStats(
        chamfer_mean=float(chamfer_distance(a, b).mean()),
        chamfer_per_point=float(chamfer_per_point(a, b).mean()),
        outlier_score_mean=float(outlier_score(b, eval_cfg.outlier).mean()),
        samples=int(a.shape[0]),
    )


def evaluate_attack(
    victim: nn.Module,
    morphnet: MorphNet,
    test_set: LabeledDataset,
    reference_accuracy: float,
    eval_cfg: Optional[EvaluationConfig] = None,
    targets: Optional[Sequence[int]] = None,
    victim_arch: str = "pointnet_mini",
    source_arch: str = "pointnet_mini",
    provenance: Optional[Provenance] = None,
    kind: AttackKind = "morphnet",
) -> AttackReport:
    """Full report for a generator-poisoned victim.

    ``reference_accuracy`` is the clean test accuracy (fraction) of the
    benign-trained twin.
    """
    eval_cfg = eval_cfg or EvaluationConfig()
    classes = resolve_targets(targets, test_set.num_classes)
    evaluations = [attack_success(victim, morphnet, test_set, t, eval_cfg) for t in classes]
    for ev in evaluations:
        result = ev.result
        logger.info(
            "Target %d: ASR %.1f%%, ASR-D %.1f%%", result.target, result.asr, result.asr_defended
        )
    return AttackReport.from_results(
        kind=kind,
        victim_arch=victim_arch,
        source_arch=source_arch,
        per_class=[ev.result for ev in evaluations],
        victim_accuracy=100.0 * accuracy(victim, test_set),
        reference_accuracy=100.0 * reference_accuracy,
        reconstruction=reconstruction_stats(
            [ev.benign for ev in evaluations], [ev.poisoned for ev in evaluations], eval_cfg
        ),
        provenance=provenance,
    )


def write_report(report: AttackReport, directory: Path, stem: str = "report") -> None:
    """Write ``<stem>.json`` and the flat per-class CSV."""
    write_json_atomic(directory / f"{stem}.json", report)
    write_csv(
        directory / f"{stem}_per_class.csv",
        PER_CLASS_COLUMNS,
        [r.model_dump() for r in report.per_class],
    )


# =============================================================================
# Orchestration
# =============================================================================


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag any failure inside the block with the stage name."""
    try:
        yield
    except StageError:
        raise
    except (BackdoorToolkitError, ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        raise StageError(name, exc) from exc


def _provenance(config: ExperimentConfig, models: dict[str, nn.Module]) -> Provenance:
    return Provenance(
        seeds=config.seeds.model_dump(),
        configs=config.model_dump(mode="json", by_alias=True, exclude={"output_dir"}),
        checkpoints={name: model_digest(m) for name, m in models.items()},
    )


class VictimPair(NamedTuple):
    victim: ClassifierRun
    twin: ClassifierRun


def train_victim_pair(
    poisoned_train: LabeledDataset,
    clean_train: LabeledDataset,
    train_cfg: TrainConfig,
    arch: ClassifierArch,
    history_dir: Optional[Path] = None,
) -> VictimPair:
    """Victim on the poisoned set and its benign twin on the clean set, same schedule."""

    def history(name: str) -> Optional[Path]:
        return history_dir / f"{name}_{arch}.csv" if history_dir is not None else None

    victim = train_classifier(poisoned_train, train_cfg, arch, history("victim"))
    twin = train_classifier(clean_train, train_cfg, arch, history("twin"))
    return VictimPair(victim, twin)


def evaluate_against_twin(
    victim: nn.Module,
    twin: nn.Module,
    morphnet: MorphNet,
    test_set: LabeledDataset,
    eval_cfg: Optional[EvaluationConfig] = None,
    targets: Optional[Sequence[int]] = None,
    victim_arch: str = "pointnet_mini",
    source_arch: str = "pointnet_mini",
    provenance: Optional[Provenance] = None,
) -> AttackReport:
    """:func:`evaluate_attack` with the twin's clean accuracy as the reference."""
    return evaluate_attack(
        victim,
        morphnet,
        test_set,
        accuracy(twin, test_set),
        eval_cfg,
        targets,
        victim_arch=victim_arch,
        source_arch=source_arch,
        provenance=provenance,
    )


def run_attack_experiment(
    config: ExperimentConfig,
    splits: Optional[tuple[LabeledDataset, LabeledDataset]] = None,
    output_dir: Optional[Path] = None,
) -> AttackReport:
    """Clean training, generator training, poisoning, victim training, evaluation.

    Runs in memory on the same building blocks as the staged pipeline.
    """
    with stage("gen-data"):
        train, test = splits or generate_synthetic_splits(config.dataset, config.seeds.data)
    with stage("train-clean"):
        clean = train_classifier(train, config.clean_model.train, config.clean_model.arch).model
    with stage("train-morphnet"):
        morphnet = train_morphnet(clean, train, config.morph_train, config.morphnet).model
    with stage("poison"):
        poisoned = poison_training_set(morphnet, train, config.poison)
    with stage("train-victim"):
        pair = train_victim_pair(poisoned, train, config.victim.train, config.victim.arch)
    with stage("evaluate"):
        report = evaluate_against_twin(
            pair.victim.model,
            pair.twin.model,
            morphnet,
            test,
            config.evaluation,
            config.poison.target_classes,
            victim_arch=config.victim.arch,
            source_arch=config.clean_model.arch,
            provenance=_provenance(
                config,
                {
                    "clean": clean,
                    "morphnet": morphnet,
                    "victim": pair.victim.model,
                    "twin": pair.twin.model,
                },
            ),
        )
    if output_dir is not None:
        write_report(report, output_dir)
    return report


def transfer_eval(
    morphnet: MorphNet,
    poisoned_train: LabeledDataset,
    arch: ClassifierArch,
    test_set: LabeledDataset,
    clean_train: LabeledDataset,
    train_cfg: Optional[TrainConfig] = None,
    eval_cfg: Optional[EvaluationConfig] = None,
    targets: Optional[Sequence[int]] = None,
    source_arch: str = "pointnet_mini",
    history_dir: Optional[Path] = None,
) -> AttackReport:
    """Train a victim of another architecture on the same poisoned set and evaluate it."""
    with stage("transfer"):
        pair = train_victim_pair(
            poisoned_train, clean_train, train_cfg or TrainConfig(), arch, history_dir
        )
        return evaluate_against_twin(
            pair.victim.model,
            pair.twin.model,
            morphnet,
            test_set,
            eval_cfg,
            targets,
            victim_arch=arch,
            source_arch=source_arch,
            provenance=Provenance(
                checkpoints={
                    "morphnet": model_digest(morphnet),
                    "victim": model_digest(pair.victim.model),
                    "twin": model_digest(pair.twin.model),
                }
            ),
        )


# =============================================================================
# Qualitative Export
# =============================================================================


@torch.no_grad()
def largest_difference_regions(
    benign: Tensor, poisoned: Tensor, k: int = 16, regions: int = 3
) -> list[tuple[np.ndarray, float]]:
    """Centres of the poisoned-cloud patches that moved furthest from the benign cloud.

    A point's displacement is its distance to the nearest benign point; a
    patch is a point and its k nearest poisoned neighbours, scored by mean
    displacement. Patches are picked greedily without overlap.
    """
    poisoned = poisoned.to(torch.float64)
    benign = benign.to(poisoned.dtype)
    num_points = poisoned.shape[0]
    k = min(k, num_points - 1)
    diff = poisoned.unsqueeze(1) - benign.unsqueeze(0)
    displacement = (diff * diff).sum(-1).min(dim=1).values.sqrt()
    if k >= 1:
        patches = torch.cat(
            [torch.arange(num_points).unsqueeze(1), knn_indices(poisoned, k)], dim=1
        )
    else:
        patches = torch.arange(num_points).unsqueeze(1)
    scores = displacement[patches].mean(dim=1)
    order = torch.sort(-scores, stable=True).indices.tolist()

    used = torch.zeros(num_points, dtype=torch.bool)
    picked: list[tuple[np.ndarray, float]] = []
    for i in order:
        if len(picked) >= regions:
            break
        if used[patches[i]].any():
            continue
        used[patches[i]] = True
        picked.append((poisoned[i].numpy().copy(), float(scores[i])))
    return picked


def export_samples(
    morphnet: MorphNet,
    test_set: LabeledDataset,
    per_class: int,
    directory: Path,
    targets: Optional[Sequence[int]] = None,
    regions: int = 3,
) -> None:
    """Write benign/poisoned pairs per target class plus their difference regions."""
    rows: list[dict[str, object]] = []
    for t in resolve_targets(targets, test_set.num_classes):
        indices = eligible_indices(test_set, t)[:per_class]
        benign_set = test_set.subset(indices)
        poisoned = generate_poisoned(morphnet, benign_set.points_tensor(), t)
        poisoned_set = benign_set.with_replaced(
            np.arange(len(benign_set)),
            poisoned.numpy(),
            np.full(len(benign_set), t, dtype=np.int64),
        )
        save_dataset(benign_set, directory / f"target_{t}" / "benign")
        save_dataset(poisoned_set, directory / f"target_{t}" / "poisoned")
        for j, record in enumerate(indices):
            found = largest_difference_regions(
                benign_set.points_tensor()[j], poisoned[j], regions=regions
            )
            for r, (centre, score) in enumerate(found):
                rows.append(
                    {
                        "target": t,
                        "record": int(record),
                        "region": r,
                        "x": float(centre[0]),
                        "y": float(centre[1]),
                        "z": float(centre[2]),
                        "score": score,
                    }
                )
    write_csv(directory / "regions.csv", REGION_COLUMNS, rows)


__all__ = [
    "PER_CLASS_COLUMNS",
    "ClassEvaluation",
    "VictimPair",
    "asr",
    "attack_success",
    "eligible_indices",
    "evaluate_against_twin",
    "evaluate_attack",
    "export_samples",
    "generate_poisoned",
    "largest_difference_regions",
    "masr",
    "poison_count",
    "poison_training_set",
    "reconstruction_stats",
    "resolve_targets",
    "run_attack_experiment",
    "select_poison_indices",
    "stage",
    "success_rates",
    "train_victim_pair",
    "transfer_eval",
    "write_report",
]
