"""Class-conditional point-cloud generator built from stacked morph blocks.

Each block splits into a residual branch, which keeps the per-point features
of the input, and a poisoning branch, which encodes the cloud to a latent
code, appends the one-hot target class and folds a fixed sphere grid into
per-point features. A final per-point map turns both branches back into
coordinates. Blocks are chained with the benign input fed back in between.
"""

import math
from typing import Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.transform import Rotation
from torch import Tensor

from ..errors import InvalidInputError
from ..geometry import gather_neighbors, knn_indices
from ..models import GeneratorVariant, MorphNetConfig, ResidualMode

LATENT_WIDTH = 128
FEATURE_WIDTH = 64


def sphere_grid(num_points: int, seed: int = 0) -> Tensor:
    """Fibonacci-spiral points on the unit sphere, rotated by a seeded rotation."""
    if num_points < 1:
        raise InvalidInputError(f"grid size must be positive, got {num_points}")
    i = np.arange(num_points, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / num_points
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    points = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rng = np.random.default_rng(seed)
    points = Rotation.from_quat(rng.standard_normal(4)).apply(points)
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    return torch.from_numpy(points.astype(np.float32))


def one_hot(t: Union[int, Tensor], num_classes: int) -> Tensor:
    """Standard basis vector(s) e_t as float32."""
    targets = torch.as_tensor(t, dtype=torch.long)
    if targets.numel() and (targets.min() < 0 or targets.max() >= num_classes):
        raise InvalidInputError(f"class index out of range [0, {num_classes}): {t}")
    return F.one_hot(targets, num_classes).to(torch.float32)


class MorphBlock(nn.Module):
    """One residual/poisoning block mapping N points to N points."""

    def __init__(
        self,
        num_classes: int,
        knn_k: int = 8,
        variant: GeneratorVariant = "morph",
    ):
        super().__init__()
        self.num_classes = num_classes
        self.knn_k = knn_k
        self.variant = variant
        self.t1 = nn.Sequential(
            nn.Linear(3, FEATURE_WIDTH),
            nn.ReLU(),
            nn.Linear(FEATURE_WIDTH, FEATURE_WIDTH),
            nn.ReLU(),
        )
        self.encoder_local = nn.Sequential(nn.Linear(FEATURE_WIDTH, FEATURE_WIDTH), nn.ReLU())
        self.encoder_global = nn.Sequential(nn.Linear(FEATURE_WIDTH, LATENT_WIDTH), nn.ReLU())
        code_width = LATENT_WIDTH + num_classes
        self.fold1 = nn.Sequential(
            nn.Linear(code_width + 3, 128),
            nn.ReLU(),
            nn.Linear(128, FEATURE_WIDTH),
            nn.ReLU(),
        )
        self.fold2 = nn.Sequential(
            nn.Linear(code_width + FEATURE_WIDTH, FEATURE_WIDTH),
            nn.ReLU(),
            nn.Linear(FEATURE_WIDTH, FEATURE_WIDTH),
            nn.ReLU(),
        )
        t2_in = 2 * FEATURE_WIDTH if variant == "morph" else FEATURE_WIDTH
        self.t2 = nn.Sequential(
            nn.Linear(t2_in, FEATURE_WIDTH),
            nn.ReLU(),
            nn.Linear(FEATURE_WIDTH, 3),
        )

    def encode(self, cloud: Tensor, d: Tensor) -> Tensor:
        """Latent code z of width 128: local max over neighbours, then global max."""
        h = self.encoder_local(d)
        k = min(self.knn_k, cloud.shape[1] - 1)
        if k >= 1:
            idx = knn_indices(cloud, k)
            h = torch.maximum(h, gather_neighbors(h, idx).max(dim=2).values)
        return self.encoder_global(h).max(dim=1).values

    def forward(self, cloud: Tensor, targets: Tensor, grid: Tensor) -> Tensor:
        batch, num_points, _ = cloud.shape
        if grid.shape[0] != num_points:
            raise InvalidInputError(
                f"cloud has {num_points} points but the sphere grid has {grid.shape[0]}"
            )
        d = self.t1(cloud)
        z = self.encode(cloud, d)
        code = torch.cat([z, one_hot(targets, self.num_classes).to(z.dtype)], dim=-1)
        code = code.unsqueeze(1).expand(-1, num_points, -1)
        grid_batch = grid.to(cloud.dtype).unsqueeze(0).expand(batch, -1, -1)
        f1 = self.fold1(torch.cat([code, grid_batch], dim=-1))
        p = self.fold2(torch.cat([code, f1], dim=-1))
        if self.variant == "morph":
            return self.t2(torch.cat([d, p], dim=-1))
        return self.t2(p)


class MorphNet(nn.Module):
    """Stack of morph blocks sharing one fixed sphere grid."""

    def __init__(
        self,
        num_classes: int,
        num_points: int,
        n_blocks: int = 2,
        residual_mode: ResidualMode = "mean",
        variant: GeneratorVariant = "morph",
        knn_k: int = 8,
        grid_seed: int = 0,
    ):
        super().__init__()
        if n_blocks < 1:
            raise InvalidInputError(f"n_blocks must be >= 1, got {n_blocks}")
        self.num_classes = num_classes
        self.num_points = num_points
        self.n_blocks = n_blocks
        self.residual_mode: ResidualMode = residual_mode
        self.variant: GeneratorVariant = variant
        self.knn_k = knn_k
        self.grid_seed = grid_seed
        self.register_buffer("grid", sphere_grid(num_points, grid_seed))
        self.blocks = nn.ModuleList(
            MorphBlock(num_classes, knn_k, variant) for _ in range(n_blocks)
        )

    @classmethod
    def from_config(
        cls, cfg: MorphNetConfig, num_classes: int, num_points: int, seed: int = 0
    ) -> "MorphNet":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(
                num_classes,
                num_points,
                n_blocks=cfg.n_blocks,
                residual_mode=cfg.residual_mode,
                variant=cfg.variant,
                knn_k=cfg.knn_k,
                grid_seed=cfg.grid_seed,
            )

    def config(self) -> MorphNetConfig:
        return MorphNetConfig(
            n_blocks=self.n_blocks,
            residual_mode=self.residual_mode,
            variant=self.variant,
            knn_k=self.knn_k,
            grid_seed=self.grid_seed,
        )

    def combine(self, previous: Tensor, benign: Tensor) -> Tensor:
        if self.residual_mode == "sum":
            return previous + benign
        return 0.5 * (previous + benign)

    def forward(
        self, cloud: Tensor, t: Union[int, Tensor]
    ) -> tuple[Tensor, list[Tensor]]:
        """Return the final cloud and every block output, first to last."""
        single = cloud.dim() == 2
        x = cloud.unsqueeze(0) if single else cloud
        if x.dim() != 3 or x.shape[-1] != 3:
            raise InvalidInputError(f"expected (B, N, 3) clouds, got {tuple(cloud.shape)}")
        if x.shape[1] != self.num_points:
            raise InvalidInputError(
                f"generator expects N={self.num_points}, got N={x.shape[1]}"
            )
        targets = torch.as_tensor(t, dtype=torch.long, device=x.device)
        if targets.dim() == 0:
            targets = targets.expand(x.shape[0])
        if targets.shape[0] != x.shape[0]:
            raise InvalidInputError("one target class per cloud is required")

        grid: Tensor = self.grid  # type: ignore[assignment]
        intermediates: list[Tensor] = []
        current = self.blocks[0](x, targets, grid)
        intermediates.append(current)
        for block in list(self.blocks)[1:]:
            current = block(self.combine(current, x), targets, grid)
            intermediates.append(current)

        if single:
            return current[0], [step[0] for step in intermediates]
        return current, intermediates


__all__ = [
    "FEATURE_WIDTH",
    "LATENT_WIDTH",
    "MorphBlock",
    "MorphNet",
    "one_hot",
    "sphere_grid",
]
