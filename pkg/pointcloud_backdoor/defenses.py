#!/usr/bin/env python3
"""Defense battery: training-time augmentation, spectral-signature scan, trigger reversal."""

import logging
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.transform import Rotation
from torch import Tensor

from .dataset import LabeledDataset
from .errors import InvalidInputError, NumericalError
from .models import (
    AugmentSwitches,
    ClassifierArch,
    ClassScanResult,
    CleanseConfig,
    CleanseResult,
    SpectralScanResult,
    TrainConfig,
)
from .training import ClassifierRun, train_classifier

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0

CloudLike = Union[Tensor, np.ndarray]

# ========== Augmentation ==========

AXIS_ALIGNED_ROTATIONS: np.ndarray = Rotation.create_group("O").as_matrix()


def rotate24(cloud: CloudLike, index: int) -> Tensor:
    """Apply the ``index``-th proper rotation of the cube to a cloud or batch."""
    if not 0 <= index < len(AXIS_ALIGNED_ROTATIONS):
        raise InvalidInputError(f"rotation index must be in [0, 24), got {index}")
    tensor = torch.as_tensor(cloud)
    matrix = torch.as_tensor(AXIS_ALIGNED_ROTATIONS[index], dtype=tensor.dtype)
    return tensor @ matrix.T


def augment_rotate24(cloud: CloudLike, rng: np.random.Generator) -> Tensor:
    """Rotate by one of the 24 axis-aligned rotations, chosen uniformly."""
    return rotate24(cloud, int(rng.integers(0, len(AXIS_ALIGNED_ROTATIONS))))


def augment_scale_jitter(
    cloud: CloudLike,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.8, 1.25),
    sigma: float = 0.01,
    clip: float = 0.05,
) -> Tensor:
    """Uniform scale, then per-point Gaussian jitter whose length is capped at clip."""
    tensor = torch.as_tensor(cloud)
    scale = rng.uniform(scale_range[0], scale_range[1])
    noise = rng.normal(0.0, sigma, size=tuple(tensor.shape))
    lengths = np.linalg.norm(noise, axis=-1, keepdims=True)
    noise *= np.minimum(1.0, clip / np.maximum(lengths, 1e-12))
    return tensor * scale + torch.as_tensor(noise, dtype=tensor.dtype)


def build_batch_augmenter(
    switches: AugmentSwitches, rng: np.random.Generator
) -> Callable[[Tensor], Tensor]:
    """Per-batch transform applying the enabled augmentations cloud by cloud."""

    def augment(batch: Tensor) -> Tensor:
        clouds = list(batch)
        if switches.rotate24:
            clouds = [augment_rotate24(c, rng) for c in clouds]
        if switches.scale_jitter:
            clouds = [augment_scale_jitter(c, rng) for c in clouds]
        return torch.stack(clouds)

    return augment


def defended_training(
    dataset: LabeledDataset,
    switches: AugmentSwitches,
    cfg: TrainConfig,
    arch: ClassifierArch = "pointnet_mini",
) -> ClassifierRun:
    """Victim training with the selected augmentations applied per batch."""
    return train_classifier(dataset, cfg.model_copy(update={"augment": switches}), arch)


# ========== Spectral Signatures ==========


@torch.no_grad()
def extract_features(model: nn.Module, points: Tensor, batch_size: int = 256) -> np.ndarray:
    features = getattr(model, "features", None)
    if features is None:
        raise InvalidInputError(f"{type(model).__name__} exposes no penultimate features")
    model.eval()
    chunks = [
        features(points[start : start + batch_size]).double().numpy()
        for start in range(0, points.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def spectral_scores(features: np.ndarray) -> np.ndarray:
    """Absolute cosine similarity of centred features to the top right singular vector."""
    centred = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    top = vt[0]
    norms = np.linalg.norm(centred, axis=1) * np.linalg.norm(top)
    projections = np.abs(centred @ top)
    return np.divide(projections, norms, out=np.zeros_like(projections), where=norms > 0)


def spectral_signature_scan(
    victim: nn.Module, poisoned_train: LabeledDataset, t: int
) -> ClassScanResult:
    """Percentage of true poisons among the top-50% spectral candidates of class t."""
    indices = poisoned_train.class_indices(t)
    if indices.size < 2:
        raise InvalidInputError(f"class {t} has {indices.size} records; need at least 2")
    features = extract_features(victim, poisoned_train.points_tensor(indices))
    scores = spectral_scores(features)
    order = np.argsort(-scores, kind="stable")
    n_candidates = max(1, indices.size // 2)
    candidates = indices[order[:n_candidates]]
    flagged = int(poisoned_train.poisoned[candidates].sum())
    return ClassScanResult(
        target=t,
        records=int(indices.size),
        poisoned=int(poisoned_train.poisoned[indices].sum()),
        candidates=n_candidates,
        proportion=100.0 * flagged / n_candidates,
    )


def spectral_scan_all(
    victim: nn.Module,
    poisoned_train: LabeledDataset,
    classes: Optional[Sequence[int]] = None,
) -> SpectralScanResult:
    targets = list(classes) if classes is not None else list(range(poisoned_train.num_classes))
    per_class = [spectral_signature_scan(victim, poisoned_train, t) for t in targets]
    result = SpectralScanResult.from_classes(per_class)
    logger.info(
        "Spectral scan: mean %.2f%% (min %.2f, max %.2f)",
        result.mean_proportion,
        result.min_proportion,
        result.max_proportion,
    )
    return result


# ========== Neural Cleanse ==========


def anomaly_index(norms: Sequence[float], eps: float = 1e-12) -> float:
    """MAD-normalised distance of the smallest norm from the median."""
    values = np.asarray(norms, dtype=np.float64)
    if values.size == 0:
        raise InvalidInputError("anomaly index needs at least one norm")
    median = np.median(values)
    mad = MAD_CONSISTENCY * np.median(np.abs(values - median))
    return float(abs(median - values.min()) / max(mad, eps))


def per_class_anomaly(norms: Sequence[float], eps: float = 1e-12) -> list[float]:
    """Anomaly index of every class below the median (0 for the others)."""
    values = np.asarray(norms, dtype=np.float64)
    median = np.median(values)
    mad = max(MAD_CONSISTENCY * np.median(np.abs(values - median)), eps)
    return [float(max(median - v, 0.0) / mad) for v in values]


def cleanse_verdict(norms: Sequence[float]) -> CleanseResult:
    """Summarise per-class trigger norms: index, verdict, flagged classes, quartiles."""
    values = np.asarray(norms, dtype=np.float64)
    index = anomaly_index(values)
    per_class = per_class_anomaly(values)
    rest = np.delete(values, int(np.argmin(values))) if values.size > 1 else values
    q = np.quantile(rest, [0.0, 0.25, 0.5, 0.75, 1.0])
    return CleanseResult(
        norms=values.tolist(),
        anomaly_index=index,
        infected=index > ANOMALY_THRESHOLD,
        flagged_classes=[c for c, a in enumerate(per_class) if a > ANOMALY_THRESHOLD],
        per_class_anomaly=per_class,
        norm_quartiles={
            "min": float(q[0]),
            "q25": float(q[1]),
            "median": float(q[2]),
            "q75": float(q[3]),
            "max": float(q[4]),
        },
    )


class AdditiveTrigger(nn.Module):
    """Universal per-point offset field added to every cloud."""

    def __init__(self, num_points: int):
        super().__init__()
        self.delta = nn.Parameter(torch.zeros(num_points, 3))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.delta

    def l1_norm(self) -> Tensor:
        return self.delta.abs().sum()


def reverse_trigger(
    victim: nn.Module, points: Tensor, t: int, cfg: CleanseConfig
) -> float:
    """Optimise an additive trigger toward class t; return its L1 norm."""
    trigger = AdditiveTrigger(points.shape[1])
    optimizer = torch.optim.Adam(trigger.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + t)
    victim.eval()
    size = min(cfg.batch_size, points.shape[0])
    for step in range(cfg.steps):
        batch = points[torch.randint(0, points.shape[0], (size,), generator=gen)]
        logits = victim(trigger(batch))
        target = torch.full((batch.shape[0],), t, dtype=torch.long)
        loss = F.cross_entropy(logits, target) + cfg.gamma * trigger.l1_norm()
        if not torch.isfinite(loss):
            raise NumericalError("trigger reversal diverged", {"class": t, "step": step})
        (grad,) = torch.autograd.grad(loss, trigger.delta)
        trigger.delta.grad = grad
        optimizer.step()
    return float(trigger.l1_norm().detach())


def neural_cleanse(
    victim: nn.Module, clean_set: LabeledDataset, cfg: Optional[CleanseConfig] = None
) -> CleanseResult:
    """Reverse a trigger for every class and flag the model if one is anomalously small."""
    cfg = cfg or CleanseConfig()
    if len(clean_set) == 0:
        raise InvalidInputError("neural cleanse needs clean samples")
    if clean_set.poisoned.any():
        raise InvalidInputError("neural cleanse expects an unpoisoned dataset")
    rng = np.random.default_rng(cfg.seed)
    count = min(cfg.max_samples, len(clean_set))
    chosen = np.sort(rng.choice(len(clean_set), size=count, replace=False))
    points = clean_set.points_tensor(chosen)

    norms: list[float] = []
    for t in range(clean_set.num_classes):
        norms.append(reverse_trigger(victim, points, t, cfg))
        logger.info("Reversed trigger for class %d: L1 norm %.4f", t, norms[-1])
    result = cleanse_verdict(norms)
    logger.info(
        "Neural cleanse anomaly index %.3f (%s)",
        result.anomaly_index,
        "infected" if result.infected else "clean",
    )
    return result


__all__ = [
    "ANOMALY_THRESHOLD",
    "AXIS_ALIGNED_ROTATIONS",
    "MAD_CONSISTENCY",
    "AdditiveTrigger",
    "anomaly_index",
    "augment_rotate24",
    "augment_scale_jitter",
    "build_batch_augmenter",
    "cleanse_verdict",
    "defended_training",
    "extract_features",
    "neural_cleanse",
    "per_class_anomaly",
    "reverse_trigger",
    "rotate24",
    "spectral_scan_all",
    "spectral_scores",
    "spectral_signature_scan",
]
