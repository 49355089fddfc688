#!/usr/bin/env python3
"""Labeled point-cloud datasets: synthetic generation, disk format, ingestion."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, InvalidInputError, MissingArtifactError
from .geometry import normalize_unit_sphere
from .models import SHAPE_FAMILIES, DatasetMeta, DatasetSpec, PoisonFlags
from .utils import write_bytes_atomic, write_json_atomic

logger = logging.getLogger(__name__)

Split = Literal["train", "test"]
_SPLIT_CODES: dict[str, int] = {"train": 0, "test": 1}


# =============================================================================
# Dataset Container
# =============================================================================


@dataclass
class LabeledDataset:
    """Records of (cloud, label, poisoned flag, condition class).

    ``condition`` holds -1 for records that are not poisoned.
    """

    points: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split: Split
    poisoned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    condition: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: Optional[int] = None
    source: str = "synthetic"

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        records = self.labels.shape[0]
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise InvalidInputError(
                f"points must be shaped (R, N, 3), got {self.points.shape}"
            )
        if self.points.shape[0] != records:
            raise InvalidInputError("points and labels disagree on record count")
        if self.poisoned.shape[0] == 0 and records:
            self.poisoned = np.zeros(records, dtype=bool)
        if self.condition.shape[0] == 0 and records:
            self.condition = np.full(records, -1, dtype=np.int64)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        self.condition = np.asarray(self.condition, dtype=np.int64)
        if np.any(self.condition[~self.poisoned] != -1):
            raise InvalidInputError("unpoisoned records cannot carry a condition class")
        if records and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, C)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_points(self) -> int:
        return int(self.points.shape[1])

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def points_tensor(self, indices: Optional[np.ndarray] = None) -> torch.Tensor:
        selected = self.points if indices is None else self.points[indices]
        return torch.from_numpy(np.ascontiguousarray(selected))

    def labels_tensor(self, indices: Optional[np.ndarray] = None) -> torch.Tensor:
        selected = self.labels if indices is None else self.labels[indices]
        return torch.from_numpy(np.ascontiguousarray(selected))

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            points=self.points[idx],
            labels=self.labels[idx],
            class_names=list(self.class_names),
            split=self.split,
            poisoned=self.poisoned[idx],
            condition=self.condition[idx],
            seed=self.seed,
            source=self.source,
        )

    def with_replaced(
        self,
        indices: np.ndarray,
        new_points: np.ndarray,
        condition_classes: np.ndarray,
        source: str = "poisoned",
    ) -> "LabeledDataset":
        """Copy with some clouds replaced and flagged as poisoned.

        Labels are never touched.
        """
        points = self.points.copy()
        poisoned = self.poisoned.copy()
        condition = self.condition.copy()
        points[indices] = new_points
        poisoned[indices] = True
        condition[indices] = condition_classes
        return LabeledDataset(
            points=points,
            labels=self.labels.copy(),
            class_names=list(self.class_names),
            split=self.split,
            poisoned=poisoned,
            condition=condition,
            seed=self.seed,
            source=source,
        )

    def meta(self) -> DatasetMeta:
        return DatasetMeta(
            split=self.split,
            num_points=self.num_points,
            num_classes=self.num_classes,
            records=len(self),
            counts=self.counts(),
            families=list(self.class_names),
            seed=self.seed,
            source=self.source,
        )


# =============================================================================
# Shape Families
# =============================================================================


def _unit_vectors(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.standard_normal((count, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _sample_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    # Antipodal pairs keep the centroid at the origin so that all normalised
    # norms stay equal when no noise is added.
    if n == 1:
        return _unit_vectors(rng, 1)
    pairs = n // 2 if n % 2 == 0 else (n - 3) // 2
    half = _unit_vectors(rng, pairs)
    parts = [half, -half]
    if n % 2 == 1:
        basis = _unit_vectors(rng, 2)
        u = basis[0]
        w = np.cross(u, basis[1])
        w_norm = np.linalg.norm(w)
        w = w / w_norm if w_norm > 0 else np.array([0.0, 0.0, 1.0])
        angles = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        parts.append(np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w)
    return np.concatenate(parts, axis=0)


def _sample_cube(rng: np.random.Generator, n: int) -> np.ndarray:
    faces = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    points = np.empty((n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        points[rows, a] = sign[rows]
        points[rows, others[0]] = uv[rows, 0]
        points[rows, others[1]] = uv[rows, 1]
    return points


def _sample_disc_points(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.zeros(n)], axis=1)


def _sample_cylinder(rng: np.random.Generator, n: int) -> np.ndarray:
    radius, height = 0.5, 2.0
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius * radius
    weights = np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area)
    choice = rng.choice(3, size=n, p=weights)
    points = np.empty((n, 3))
    side = choice == 0
    phi = rng.uniform(0.0, 2.0 * np.pi, int(side.sum()))
    points[side] = np.stack(
        [radius * np.cos(phi), radius * np.sin(phi), rng.uniform(-1.0, 1.0, phi.shape[0])],
        axis=1,
    )
    for cap, z in ((1, height / 2), (2, -height / 2)):
        rows = choice == cap
        disc = _sample_disc_points(rng, int(rows.sum()), radius)
        disc[:, 2] = z
        points[rows] = disc
    return points


def _sample_cone(rng: np.random.Generator, n: int) -> np.ndarray:
    radius, height = 1.0, 2.0
    slant = np.hypot(radius, height)
    lateral_area = np.pi * radius * slant
    base_area = np.pi * radius * radius
    lateral = rng.uniform(0.0, lateral_area + base_area, n) < lateral_area
    points = np.empty((n, 3))
    count = int(lateral.sum())
    u = np.sqrt(rng.uniform(0.0, 1.0, count))
    phi = rng.uniform(0.0, 2.0 * np.pi, count)
    points[lateral] = np.stack(
        [u * radius * np.cos(phi), u * radius * np.sin(phi), height * (1.0 - u) - height / 2],
        axis=1,
    )
    base = _sample_disc_points(rng, n - count, radius)
    base[:, 2] = -height / 2
    points[~lateral] = base
    return points


def _sample_torus(rng: np.random.Generator, n: int) -> np.ndarray:
    major, minor = 1.0, 0.3
    accepted: list[np.ndarray] = []
    total = 0
    while total < n:
        theta = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
        phi = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
        weight = (major + minor * np.cos(phi)) / (major + minor)
        keep = rng.uniform(0.0, 1.0, 2 * n) < weight
        ring = major + minor * np.cos(phi[keep])
        batch = np.stack(
            [ring * np.cos(theta[keep]), ring * np.sin(theta[keep]), minor * np.sin(phi[keep])],
            axis=1,
        )
        accepted.append(batch)
        total += batch.shape[0]
    return np.concatenate(accepted, axis=0)[:n]


def _sample_disc(rng: np.random.Generator, n: int) -> np.ndarray:
    return _sample_disc_points(rng, n, 1.0)


def _sample_triangles(
    rng: np.random.Generator, n: int, triangles: np.ndarray
) -> np.ndarray:
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = rng.choice(len(triangles), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(0.0, 1.0, n))[:, None]
    r2 = rng.uniform(0.0, 1.0, n)[:, None]
    return (1 - r1) * a[faces] + r1 * (1 - r2) * b[faces] + r1 * r2 * c[faces]


_PYRAMID_TRIANGLES = np.array(
    [
        [[-1, -1, 0], [1, -1, 0], [1, 1, 0]],
        [[-1, -1, 0], [1, 1, 0], [-1, 1, 0]],
        [[-1, -1, 0], [1, -1, 0], [0, 0, 1.5]],
        [[1, -1, 0], [1, 1, 0], [0, 0, 1.5]],
        [[1, 1, 0], [-1, 1, 0], [0, 0, 1.5]],
        [[-1, 1, 0], [-1, -1, 0], [0, 0, 1.5]],
    ],
    dtype=np.float64,
)


def _sample_pyramid(rng: np.random.Generator, n: int) -> np.ndarray:
    return _sample_triangles(rng, n, _PYRAMID_TRIANGLES)


def _sample_helix(rng: np.random.Generator, n: int) -> np.ndarray:
    t = rng.uniform(0.0, 4.0 * np.pi, n)
    centre = np.stack([np.cos(t), np.sin(t), 0.25 * t], axis=1)
    return centre + 0.08 * _unit_vectors(rng, n)


FAMILY_SAMPLERS: dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "disc": _sample_disc,
    "pyramid": _sample_pyramid,
    "helix": _sample_helix,
}


def _record_rng(seed: int, split: Split, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODES[split], index]))


def _normalize(points: np.ndarray) -> np.ndarray:
    tensor = torch.from_numpy(np.ascontiguousarray(points, dtype=np.float64))
    return normalize_unit_sphere(tensor).numpy().astype(np.float32)


def sample_family_cloud(
    family: str, num_points: int, noise_sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample one cloud of a family: random rotation, scale, noise, normalisation."""
    sampler = FAMILY_SAMPLERS.get(family)
    if sampler is None:
        raise ConfigurationError(
            f"unknown shape family '{family}' (known: {', '.join(SHAPE_FAMILIES)})",
            "dataset.families",
        )
    points = sampler(rng, num_points)
    rotation = Rotation.from_quat(rng.standard_normal(4))
    points = rotation.apply(points) * rng.uniform(0.8, 1.0)
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, size=points.shape)
    return _normalize(points)


# =============================================================================
# Synthetic Generation
# =============================================================================


def generate_synthetic_dataset(
    spec: DatasetSpec, seed: int, split: Split = "train"
) -> LabeledDataset:
    """Deterministic synthetic corpus for one split.

    Each record draws from its own RNG stream derived from (seed, split,
    record index), so generation order does not affect the result.
    """
    if len(spec.families) < 2:
        raise ConfigurationError("at least two shape families are required", "dataset.families")
    for family in spec.families:
        if family not in FAMILY_SAMPLERS:
            raise ConfigurationError(
                f"unknown shape family '{family}' (known: {', '.join(SHAPE_FAMILIES)})",
                "dataset.families",
            )
    per_class = spec.samples_per_class if split == "train" else spec.test_per_class
    records = per_class * len(spec.families)
    points = np.empty((records, spec.num_points, 3), dtype=np.float32)
    labels = np.empty(records, dtype=np.int64)

    for label, family in enumerate(spec.families):
        for j in range(per_class):
            index = label * per_class + j
            rng = _record_rng(seed, split, index)
            points[index] = sample_family_cloud(family, spec.num_points, spec.noise_sigma, rng)
            labels[index] = label

    logger.info("Generated %d %s records over %d families", records, split, len(spec.families))
    return LabeledDataset(
        points=points,
        labels=labels,
        class_names=list(spec.families),
        split=split,
        seed=seed,
    )


def generate_synthetic_splits(
    spec: DatasetSpec, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    return (
        generate_synthetic_dataset(spec, seed, "train"),
        generate_synthetic_dataset(spec, seed, "test"),
    )


# =============================================================================
# External XYZ Ingestion
# =============================================================================


def _resample(points: np.ndarray, num_points: int, rng: np.random.Generator) -> np.ndarray:
    replace = points.shape[0] < num_points
    chosen = rng.choice(points.shape[0], size=num_points, replace=replace)
    return points[np.sort(chosen)]


def ingest_xyz_tree(
    root: Path,
    num_points: int,
    seed: int,
    split: Split = "train",
    class_names: Optional[list[str]] = None,
) -> LabeledDataset:
    """Build a dataset from ``root/<class>/*.xyz`` ASCII clouds.

    Each file is resampled to ``num_points`` points (without replacement when
    it has enough points) and normalised to the unit sphere. Passing
    ``class_names`` pins the label order, e.g. to match a train split.
    """
    if not root.is_dir():
        raise MissingArtifactError(f"XYZ directory not found: {root}")
    names = class_names or sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(names) < 2:
        raise InvalidInputError(f"need at least two class directories under {root}")

    clouds: list[np.ndarray] = []
    labels: list[int] = []
    for label, name in enumerate(names):
        files = sorted((root / name).glob("*.xyz"))
        for path in files:
            raw = np.loadtxt(path, usecols=(0, 1, 2), ndmin=2, dtype=np.float64)
            if raw.shape[0] == 0:
                raise InvalidInputError(f"empty point file: {path}")
            if not np.all(np.isfinite(raw)):
                raise InvalidInputError(f"non-finite coordinates in {path}")
            rng = _record_rng(seed, split, len(clouds))
            clouds.append(_normalize(_resample(raw, num_points, rng)))
            labels.append(label)

    if not clouds:
        raise InvalidInputError(f"no .xyz files found under {root}")
    logger.info("Ingested %d clouds from %s", len(clouds), root)
    return LabeledDataset(
        points=np.stack(clouds),
        labels=np.asarray(labels),
        class_names=list(names),
        split=split,
        seed=seed,
        source="xyz",
    )


# =============================================================================
# Disk Format
# =============================================================================


def save_dataset(dataset: LabeledDataset, directory: Path) -> None:
    """Write ``meta.json``, ``points.f32``, ``labels.i32`` and ``poison.json``."""
    directory.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(directory / "points.f32", dataset.points.astype("<f4").tobytes())
    write_bytes_atomic(directory / "labels.i32", dataset.labels.astype("<i4").tobytes())
    poison_path = directory / "poison.json"
    if dataset.poisoned.any():
        flags = PoisonFlags(
            poisoned=dataset.poisoned.tolist(),
            condition_class=[int(c) if c >= 0 else None for c in dataset.condition],
        )
        write_json_atomic(poison_path, flags)
    elif poison_path.exists():
        poison_path.unlink()
    write_json_atomic(directory / "meta.json", dataset.meta())


def load_dataset(directory: Path) -> LabeledDataset:
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise MissingArtifactError(f"dataset not found: {directory}")
    meta = DatasetMeta.model_validate_json(meta_path.read_text(encoding="utf-8"))

    points = np.fromfile(directory / "points.f32", dtype="<f4")
    labels = np.fromfile(directory / "labels.i32", dtype="<i4").astype(np.int64)
    expected = meta.records * meta.num_points * 3
    if points.size != expected or labels.size != meta.records:
        raise InvalidInputError(
            f"dataset files in {directory} do not match meta.json "
            f"({points.size} floats, {labels.size} labels for {meta.records} records)"
        )
    points = points.reshape(meta.records, meta.num_points, 3).astype(np.float32)

    poisoned = np.zeros(meta.records, dtype=bool)
    condition = np.full(meta.records, -1, dtype=np.int64)
    poison_path = directory / "poison.json"
    if poison_path.exists():
        flags = PoisonFlags.model_validate(json.loads(poison_path.read_text(encoding="utf-8")))
        poisoned = np.asarray(flags.poisoned, dtype=bool)
        condition = np.asarray(
            [-1 if c is None else c for c in flags.condition_class], dtype=np.int64
        )

    return LabeledDataset(
        points=points,
        labels=labels,
        class_names=list(meta.families),
        split=meta.split,
        poisoned=poisoned,
        condition=condition,
        seed=meta.seed,
        source=meta.source,
    )


__all__ = [
    "FAMILY_SAMPLERS",
    "LabeledDataset",
    "generate_synthetic_dataset",
    "generate_synthetic_splits",
    "ingest_xyz_tree",
    "load_dataset",
    "sample_family_cloud",
    "save_dataset",
]
