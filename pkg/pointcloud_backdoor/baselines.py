#!/usr/bin/env python3
"""Clean-label trigger baselines: static line trigger and optimised universal trigger.

Both follow the masked-replacement form ``x' = (1 - m) * x + m * s``: a
selection of points is swapped for trigger points while N stays fixed.
Poisoned training samples of the target class are first hardened with PGD
against the clean model, then triggered; labels are never changed.
"""

import logging
from typing import Literal, NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .attack import (
    eligible_indices,
    reconstruction_stats,
    resolve_targets,
    select_poison_indices,
    stage,
    success_rates,
)
from .dataset import LabeledDataset
from .defenses import spectral_signature_scan
from .errors import InvalidInputError, NumericalError
from .models import (
    AttackReport,
    ClassAttackResult,
    ClassScanResult,
    ExperimentConfig,
    PGDConfig,
    Provenance,
    SpectralScanResult,
    StaticTriggerSpec,
    UniversalTrigger,
    UniversalTriggerConfig,
)
from .networks import model_digest
from .training import accuracy, loss_den, train_classifier

logger = logging.getLogger(__name__)

BaselineKind = Literal["static", "universal", "universal_den"]
BASELINE_KINDS = ("static", "universal", "universal_den")

SeedLike = Union[int, np.random.Generator]


# ========== Trigger Geometry ==========


def static_trigger_points(spec: StaticTriggerSpec) -> Tensor:
    """Points evenly spaced from the origin along ``direction``, ending at ``extent``."""
    direction = torch.tensor(spec.direction, dtype=torch.float64)
    steps = torch.arange(1, spec.num_points + 1, dtype=torch.float64) / spec.num_points
    return (spec.extent * steps).unsqueeze(1) * direction


def replacement_indices(
    num_points: int, count: int, seed: SeedLike
) -> np.ndarray:
    if count >= num_points:
        raise InvalidInputError(
            f"trigger size {count} must be smaller than the cloud size {num_points}"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(num_points, size=count, replace=False))


def apply_static_trigger(cloud: Tensor, spec: StaticTriggerSpec, seed: SeedLike) -> Tensor:
    """Replace a seeded-random subset of points by the line trigger."""
    cloud = torch.as_tensor(cloud)
    indices = replacement_indices(cloud.shape[0], spec.num_points, seed)
    out = cloud.clone()
    out[torch.from_numpy(indices)] = static_trigger_points(spec).to(cloud.dtype)
    return out


def attach_trigger(clouds: Tensor, trigger: Tensor, indices: Tensor) -> Tensor:
    """Substitute ``trigger`` (n, 3) into every cloud at per-cloud ``indices`` (B, n).

    Differentiable with respect to the trigger coordinates.
    """
    out = clouds.clone()
    batch = torch.arange(clouds.shape[0]).unsqueeze(1)
    out[batch, indices] = trigger.to(clouds.dtype).unsqueeze(0).expand(clouds.shape[0], -1, -1)
    return out


def batch_replacement_indices(
    count: int, num_points: int, trigger_size: int, rng: np.random.Generator
) -> Tensor:
    rows = [replacement_indices(num_points, trigger_size, rng) for _ in range(count)]
    if not rows:
        return torch.zeros((0, trigger_size), dtype=torch.long)
    return torch.from_numpy(np.stack(rows)).long()


# ========== PGD Hardening ==========


def pgd_perturb(
    f_clean: nn.Module,
    cloud: Tensor,
    true_label: Union[int, Tensor],
    eps: float = 0.05,
    steps: int = 10,
    step_size: float = 0.01,
) -> Tensor:
    """Signed-gradient ascent on the true-label loss inside an L-inf ball of radius eps."""
    if eps < 0:
        raise InvalidInputError(f"eps must be non-negative, got {eps}")
    single = cloud.dim() == 2
    original = (cloud.unsqueeze(0) if single else cloud).detach()
    labels = torch.as_tensor(true_label, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(original.shape[0])
    lower, upper = original - eps, original + eps

    f_clean.eval()
    x = original.clone()
    for _ in range(steps):
        x.requires_grad_(True)
        loss = F.cross_entropy(f_clean(x), labels)
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x + step_size * grad.sign()
            x = torch.minimum(torch.maximum(x, lower), upper)
    x = x.detach()
    return x[0] if single else x


# ========== Universal Trigger ==========


def optimize_universal_trigger(
    f_clean: nn.Module,
    dataset: LabeledDataset,
    t: int,
    with_den: bool = False,
    cfg: Optional[UniversalTriggerConfig] = None,
) -> UniversalTrigger:
    """Optimise trigger points so that triggered non-target clouds are classified as t."""
    cfg = cfg or UniversalTriggerConfig()
    candidates = np.flatnonzero(dataset.labels != t)
    if candidates.size == 0:
        raise InvalidInputError(f"no non-target samples available for class {t}")
    rng = np.random.default_rng([cfg.seed, t])
    source = dataset.points_tensor()[int(rng.choice(candidates))]
    init_idx = replacement_indices(dataset.num_points, cfg.num_points, rng)
    trigger = source[torch.from_numpy(init_idx)].clone().to(torch.float32).requires_grad_(True)

    optimizer = torch.optim.Adam([trigger], lr=cfg.learning_rate)
    f_clean.eval()
    points = dataset.points_tensor()
    for step in range(cfg.steps):
        batch_idx = rng.choice(candidates, size=min(cfg.batch_size, candidates.size), replace=False)
        clouds = points[torch.from_numpy(batch_idx)]
        indices = batch_replacement_indices(
            clouds.shape[0], dataset.num_points, cfg.num_points, rng
        )
        triggered = attach_trigger(clouds, trigger, indices)
        target = torch.full((clouds.shape[0],), t, dtype=torch.long)
        loss = F.cross_entropy(f_clean(triggered), target)
        if with_den:
            loss = loss + cfg.theta * loss_den(triggered, cfg.outlier)
        if not torch.isfinite(loss):
            raise NumericalError("trigger optimisation diverged", {"class": t, "step": step})
        (grad,) = torch.autograd.grad(loss, trigger)
        trigger.grad = grad
        optimizer.step()

    coords = trigger.detach().double().tolist()
    return UniversalTrigger(
        target=t,
        points=[(c[0], c[1], c[2]) for c in coords],
        with_den=with_den,
        seed=cfg.seed,
        config=cfg,
    )


def trigger_tensor(trigger: UniversalTrigger) -> Tensor:
    return torch.tensor(trigger.points, dtype=torch.float32)


# ========== Baseline Pipeline ==========


class BaselineOutcome(NamedTuple):
    report: AttackReport
    spectral: SpectralScanResult
    triggers: list[UniversalTrigger]


def _trigger_clouds(
    kind: str,
    clouds: Tensor,
    spec: StaticTriggerSpec,
    trigger: Optional[UniversalTrigger],
    rng: np.random.Generator,
) -> Tensor:
    if clouds.shape[0] == 0:
        return clouds
    if kind == "static":
        return torch.stack([apply_static_trigger(c, spec, rng) for c in clouds])
    assert trigger is not None
    points = trigger_tensor(trigger)
    indices = batch_replacement_indices(clouds.shape[0], clouds.shape[1], points.shape[0], rng)
    return attach_trigger(clouds, points, indices)


def run_baseline_attack(
    kind: BaselineKind,
    config: ExperimentConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    f_clean: nn.Module,
    reference_accuracy: float,
) -> BaselineOutcome:
    """Poison, train and evaluate one victim per target class.

    ``reference_accuracy`` is the clean test accuracy (fraction) of the
    benign-trained twin.
    """
    if kind not in BASELINE_KINDS:
        known = ", ".join(BASELINE_KINDS)
        raise InvalidInputError(f"unknown baseline kind '{kind}' (known: {known})")
    cfg = config.baselines
    pgd: PGDConfig = cfg.pgd
    targets = resolve_targets(
        cfg.target_classes if cfg.target_classes is not None else config.poison.target_classes,
        train.num_classes,
    )
    select_rng = np.random.default_rng(config.poison.seed)

    per_class: list[ClassAttackResult] = []
    scans: list[ClassScanResult] = []
    triggers: list[UniversalTrigger] = []
    accuracies: list[float] = []
    benign_all: list[Tensor] = []
    triggered_all: list[Tensor] = []
    digests: dict[str, str] = {}

    for t in targets:
        with stage(f"baseline-{kind}-class-{t}"):
            rng = np.random.default_rng([config.seeds.baseline, t])
            trigger = None
            if kind != "static":
                trigger = optimize_universal_trigger(
                    f_clean, train, t, with_den=kind == "universal_den", cfg=cfg.universal
                )
                triggers.append(trigger)

            chosen = select_poison_indices(train, t, config.poison.alpha, select_rng)
            poisoned = train
            if chosen.size:
                hardened = pgd_perturb(
                    f_clean, train.points_tensor(chosen), t, pgd.eps, pgd.steps, pgd.step_size
                )
                triggered = _trigger_clouds(kind, hardened, cfg.static, trigger, rng)
                poisoned = train.with_replaced(
                    chosen, triggered.numpy(), np.full(chosen.size, t, dtype=np.int64)
                )

            victim = train_classifier(poisoned, config.victim.train, config.victim.arch).model
            digests[f"victim_{t}"] = model_digest(victim)

            eligible = eligible_indices(test, t, config.evaluation.exclude_target)
            benign = test.points_tensor(eligible)
            test_triggered = _trigger_clouds(kind, benign, cfg.static, trigger, rng)
            rate, defended = success_rates(victim, test_triggered, t, config.evaluation)
            per_class.append(
                ClassAttackResult(
                    target=t, asr=rate, asr_defended=defended, eligible=int(eligible.size)
                )
            )
            accuracies.append(accuracy(victim, test))
            benign_all.append(benign)
            triggered_all.append(test_triggered)
            if poisoned.class_indices(t).size >= 2:
                scans.append(spectral_signature_scan(victim, poisoned, t))
            logger.info("%s baseline target %d: ASR %.1f%%, ASR-D %.1f%%", kind, t, rate, defended)

    report = AttackReport.from_results(
        kind=kind,
        victim_arch=config.victim.arch,
        source_arch=config.clean_model.arch,
        per_class=per_class,
        victim_accuracy=100.0 * float(np.mean(accuracies)) if accuracies else 0.0,
        reference_accuracy=100.0 * reference_accuracy,
        reconstruction=reconstruction_stats(benign_all, triggered_all, config.evaluation),
        provenance=Provenance(
            seeds=config.seeds.model_dump(),
            configs=config.model_dump(mode="json", by_alias=True, exclude={"output_dir"}),
            checkpoints=digests,
        ),
    )
    return BaselineOutcome(report, SpectralScanResult.from_classes(scans), triggers)


__all__ = [
    "BASELINE_KINDS",
    "BaselineOutcome",
    "apply_static_trigger",
    "attach_trigger",
    "batch_replacement_indices",
    "optimize_universal_trigger",
    "pgd_perturb",
    "replacement_indices",
    "run_baseline_attack",
    "static_trigger_points",
    "trigger_tensor",
]
