#!/usr/bin/env python3
"""Loss terms and training loops for classifiers and the generator."""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch.utils.data import DataLoader, TensorDataset

from .dataset import LabeledDataset
from .errors import InvalidInputError, NumericalError
from .geometry import chamfer_distance, outlier_score
from .models import (
    ClassifierArch,
    EpochRecord,
    LossWeights,
    MorphEpochRecord,
    MorphNetConfig,
    MorphTrainConfig,
    OutlierParams,
    TrainConfig,
)
from .networks import MorphNet, PointNetMini, build_classifier, predict
from .utils import write_csv

logger = logging.getLogger(__name__)

MORPH_HISTORY_COLUMNS = ["epoch", "loss_cls", "loss_rec", "loss_den", "total", "wall_time"]
CLASSIFIER_HISTORY_COLUMNS = ["epoch", "loss", "accuracy", "learning_rate", "wall_time"]

Scalar = Union[float, Tensor]


# =============================================================================
# Loss Terms
# =============================================================================


def softmax_cross_entropy(logits: Tensor, labels: Union[int, Tensor]) -> Tensor:
    """Mean of -log softmax(logits)[label]; a single logit vector is allowed."""
    target = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        target = target.reshape(1)
    num_classes = logits.shape[-1]
    if target.numel() and (target.min() < 0 or target.max() >= num_classes):
        raise InvalidInputError(f"label out of range [0, {num_classes})")
    return F.cross_entropy(logits, target)


def loss_cls(f_clean: nn.Module, poisoned: Tensor, targets: Tensor) -> Tensor:
    """Cross-entropy of the reference classifier toward each conditioning target."""
    return softmax_cross_entropy(f_clean(poisoned), targets)


def loss_rec(benign: Tensor, intermediates: Sequence[Tensor]) -> Tensor:
    """Chamfer distance to the benign cloud summed over every block output.

    Batched inputs give the batch mean of that per-cloud sum.
    """
    total = sum(chamfer_distance(benign, step) for step in intermediates)
    if not isinstance(total, Tensor):
        return torch.zeros((), dtype=benign.dtype)
    return total.mean() if total.dim() else total


def loss_den(poisoned: Tensor, params: Optional[OutlierParams] = None) -> Tensor:
    """Batch mean of the top-m outlier score."""
    score = outlier_score(poisoned, params or OutlierParams())
    return score.mean() if score.dim() else score


@dataclass
class LossParts:
    cls: Scalar
    rec: Scalar
    den: Scalar

    def as_floats(self) -> dict[str, float]:
        return {
            "loss_cls": float(self.cls),
            "loss_rec": float(self.rec),
            "loss_den": float(self.den),
        }


def total_loss(parts: LossParts, weights: LossWeights) -> Scalar:
    """``cls + lambda * rec + theta * den``; theta = 0 drops the denoising term."""
    values = parts.as_floats()
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError("non-finite loss term", bad)
    total = parts.cls + weights.lambda_ * parts.rec
    if weights.theta != 0.0:
        total = total + weights.theta * parts.den
    return total


# =============================================================================
# Classifier Training
# =============================================================================


class ClassifierRun(NamedTuple):
    model: PointNetMini
    history: list[EpochRecord]


def _make_optimizer(
    kind: str, params: Sequence[nn.Parameter], lr: float, momentum: float, weight_decay: float
) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _check_parameters(model: nn.Module, context: dict[str, object]) -> None:
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericalError("non-finite parameter", {**context, "parameter": name})


def train_classifier(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    arch: ClassifierArch = "pointnet_mini",
    history_path: Optional[Path] = None,
) -> ClassifierRun:
    """Mini-batch cross-entropy training of a fresh classifier.

    Deterministic for a fixed ``cfg.seed``. Augmentations selected in
    ``cfg.augment`` are applied to every batch. Zero epochs return the
    initialisation.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    model = build_classifier(arch, dataset.num_classes, dataset.num_points, cfg.seed)
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        model.eval()
        return ClassifierRun(model, history)

    augment = None
    if cfg.augment.enabled:
        from .defenses import build_batch_augmenter

        augment = build_batch_augmenter(cfg.augment, np.random.default_rng(cfg.seed))

    loader_gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        TensorDataset(dataset.points_tensor(), dataset.labels_tensor()),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=loader_gen,
    )
    optimizer = _make_optimizer(
        cfg.optimizer, list(model.parameters()), cfg.learning_rate, cfg.momentum, cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(cfg.lr_milestones), gamma=cfg.lr_gamma
    )

    model.train()
    for epoch in range(cfg.epochs):
        t_start = time.time()
        loss_sum, correct, seen = 0.0, 0, 0
        learning_rate = optimizer.param_groups[0]["lr"]
        for step, (points, labels) in enumerate(loader):
            if augment is not None:
                points = augment(points)
            logits = model(points)
            loss = softmax_cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise NumericalError(
                    "classifier training diverged",
                    {"arch": arch, "epoch": epoch, "step": step, "loss": float(loss)},
                )
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip_norm is not None:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            optimizer.step()

            loss_sum += float(loss) * labels.shape[0]
            correct += int((logits.argmax(dim=-1) == labels).sum())
            seen += labels.shape[0]
        scheduler.step()
        _check_parameters(model, {"arch": arch, "epoch": epoch})

        record = EpochRecord(
            epoch=epoch,
            loss=loss_sum / seen,
            accuracy=correct / seen,
            learning_rate=learning_rate,
            wall_time=time.time() - t_start,
        )
        history.append(record)
        logger.info(
            "%s epoch %d: loss=%.4f acc=%.3f lr=%.4g",
            arch,
            epoch,
            record.loss,
            record.accuracy,
            learning_rate,
        )

    model.eval()
    if history_path is not None:
        write_csv(history_path, CLASSIFIER_HISTORY_COLUMNS, [r.model_dump() for r in history])
    return ClassifierRun(model, history)


def accuracy(model: nn.Module, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of records whose argmax logit equals the label."""
    if len(dataset) == 0:
        return 0.0
    predictions = predict(model, dataset.points_tensor(), batch_size)
    return float((predictions == dataset.labels_tensor()).double().mean())


# =============================================================================
# Generator Training
# =============================================================================


class MorphRun(NamedTuple):
    model: MorphNet
    history: list[MorphEpochRecord]


def _expand_targets(
    points: Tensor, num_classes: int, policy: str, generator: torch.Generator
) -> tuple[Tensor, Tensor]:
    batch = points.shape[0]
    if policy == "all":
        targets = torch.arange(num_classes).repeat_interleave(batch)
        return points.repeat(num_classes, 1, 1), targets
    return points, torch.randint(0, num_classes, (batch,), generator=generator)


def train_morphnet(
    f_clean: nn.Module,
    dataset: LabeledDataset,
    cfg: MorphTrainConfig,
    arch: Optional[MorphNetConfig] = None,
    history_path: Optional[Path] = None,
) -> MorphRun:
    """Train the generator against a frozen reference classifier.

    With ``target_sampling="random"`` every sample gets one uniformly drawn
    target per step; ``"all"`` pairs every sample with every class.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot train the generator on an empty dataset")
    arch = arch or MorphNetConfig()

    clean_acc = accuracy(f_clean, dataset)
    if clean_acc < 0.8:
        logger.warning(
            "Reference classifier accuracy is %.3f (< 0.8); "
            "the generator may not learn the targets",
            clean_acc,
        )

    f_clean.eval()
    frozen_flags = [p.requires_grad for p in f_clean.parameters()]
    for p in f_clean.parameters():
        p.requires_grad_(False)

    model = MorphNet.from_config(arch, dataset.num_classes, dataset.num_points, seed=cfg.seed)
    history: list[MorphEpochRecord] = []
    try:
        if cfg.epochs > 0:
            _fit_morphnet(model, f_clean, dataset, cfg, history)
    finally:
        for p, flag in zip(f_clean.parameters(), frozen_flags):
            p.requires_grad_(flag)

    model.eval()
    if history_path is not None:
        write_csv(history_path, MORPH_HISTORY_COLUMNS, [r.model_dump() for r in history])
    return MorphRun(model, history)


def _fit_morphnet(
    model: MorphNet,
    f_clean: nn.Module,
    dataset: LabeledDataset,
    cfg: MorphTrainConfig,
    history: list[MorphEpochRecord],
) -> None:
    loader = DataLoader(
        TensorDataset(dataset.points_tensor()),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    target_gen = torch.Generator().manual_seed(cfg.seed + 1)
    optimizer = _make_optimizer(
        cfg.optimizer, list(model.parameters()), cfg.learning_rate, 0.9, 0.0
    )
    model.train()

    for epoch in range(cfg.epochs):
        t_start = time.time()
        sums = {"loss_cls": 0.0, "loss_rec": 0.0, "loss_den": 0.0, "total": 0.0}
        batches = 0
        for step, (points,) in enumerate(loader):
            inputs, targets = _expand_targets(
                points, dataset.num_classes, cfg.target_sampling, target_gen
            )
            final, intermediates = model(inputs, targets)
            parts = LossParts(
                cls=loss_cls(f_clean, final, targets),
                rec=loss_rec(inputs, intermediates),
                den=loss_den(final, cfg.outlier),
            )
            try:
                total = total_loss(parts, cfg.weights)
            except NumericalError as exc:
                raise NumericalError(
                    "generator training diverged",
                    {**exc.diagnostics, "epoch": epoch, "step": step},
                ) from exc
            assert isinstance(total, Tensor)
            if not torch.isfinite(total):
                raise NumericalError(
                    "generator training diverged", {"epoch": epoch, "step": step}
                )

            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip_norm is not None:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            optimizer.step()

            for key, value in parts.as_floats().items():
                sums[key] += value
            sums["total"] += float(total)
            batches += 1
        _check_parameters(model, {"stage": "train-morphnet", "epoch": epoch})

        record = MorphEpochRecord(
            epoch=epoch,
            loss_cls=sums["loss_cls"] / batches,
            loss_rec=sums["loss_rec"] / batches,
            loss_den=sums["loss_den"] / batches,
            total=sums["total"] / batches,
            wall_time=time.time() - t_start,
        )
        history.append(record)
        logger.info(
            "morphnet epoch %d: cls=%.4f rec=%.4f den=%.4f total=%.4f",
            epoch,
            record.loss_cls,
            record.loss_rec,
            record.loss_den,
            record.total,
        )


__all__ = [
    "CLASSIFIER_HISTORY_COLUMNS",
    "MORPH_HISTORY_COLUMNS",
    "ClassifierRun",
    "LossParts",
    "MorphRun",
    "accuracy",
    "loss_cls",
    "loss_den",
    "loss_rec",
    "softmax_cross_entropy",
    "total_loss",
    "train_classifier",
    "train_morphnet",
]
