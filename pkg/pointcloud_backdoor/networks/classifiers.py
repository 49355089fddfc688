"""Point-cloud classifiers: a reduced PointNet and a single-stage edge-conv variant."""

from typing import Union

import torch
import torch.nn as nn
from torch import Tensor

from ..errors import InvalidInputError
from ..geometry import gather_neighbors, knn_indices
from ..models import ClassifierArch


def _check_batch(x: Tensor, num_points: int) -> None:
    if x.dim() != 3 or x.shape[-1] != 3 or x.shape[1] != num_points:
        raise InvalidInputError(
            f"classifier input must be shaped (B, {num_points}, 3), got {tuple(x.shape)}"
        )


class PointNetMini(nn.Module):
    """Shared per-point MLP, global max-pool, two-layer head.

    No spatial or feature transform sub-networks.
    """

    arch: ClassifierArch = "pointnet_mini"

    def __init__(self, num_classes: int, num_points: int):
        super().__init__()
        if num_classes < 2:
            raise InvalidInputError(f"need at least two classes, got {num_classes}")
        self.num_classes = num_classes
        self.num_points = num_points
        self.point_mlp = nn.Sequential(
            nn.Linear(3, 64),
            nn.ReLU(),
            nn.Linear(64, 128),
            nn.ReLU(),
            nn.Linear(128, 256),
            nn.ReLU(),
        )
        self.fc1 = nn.Linear(256, 128)
        self.fc2 = nn.Linear(128, num_classes)

    def point_features(self, x: Tensor) -> Tensor:
        return self.point_mlp(x)

    def features(self, x: Tensor) -> Tensor:
        """Penultimate 128-wide representation used by the spectral scan."""
        _check_batch(x, self.num_points)
        pooled = self.point_features(x).max(dim=1).values
        return torch.relu(self.fc1(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.features(x))


class EdgeConvMini(PointNetMini):
    """PointNetMini preceded by one k-NN edge-feature aggregation stage."""

    arch: ClassifierArch = "edgeconv_mini"

    def __init__(self, num_classes: int, num_points: int, k: int = 8):
        super().__init__(num_classes, num_points)
        self.k = k
        self.edge_mlp = nn.Sequential(nn.Linear(6, 64), nn.ReLU())
        self.point_mlp = nn.Sequential(
            nn.Linear(64, 128),
            nn.ReLU(),
            nn.Linear(128, 256),
            nn.ReLU(),
        )

    def point_features(self, x: Tensor) -> Tensor:
        num_points = x.shape[1]
        k = min(self.k, num_points - 1)
        if k < 1:
            edge = torch.cat([torch.zeros_like(x), x], dim=-1)
            return self.point_mlp(self.edge_mlp(edge))
        idx = knn_indices(x, k)
        neighbours = gather_neighbors(x, idx)
        centre = x.unsqueeze(2).expand(-1, -1, k, -1)
        edge = torch.cat([neighbours - centre, centre], dim=-1)
        local = self.edge_mlp(edge).max(dim=2).values
        return self.point_mlp(local)


Classifier = Union[PointNetMini, EdgeConvMini]

CLASSIFIER_TYPES: dict[str, type[PointNetMini]] = {
    "pointnet_mini": PointNetMini,
    "edgeconv_mini": EdgeConvMini,
}


def build_classifier(
    arch: str, num_classes: int, num_points: int, seed: int = 0
) -> PointNetMini:
    """Instantiate a classifier with seeded fan-in uniform initialisation.

    The global torch RNG state is left untouched.
    """
    cls = CLASSIFIER_TYPES.get(arch)
    if cls is None:
        raise InvalidInputError(
            f"unknown classifier architecture '{arch}' "
            f"(known: {', '.join(CLASSIFIER_TYPES)})"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(num_classes, num_points)


@torch.no_grad()
def predict(model: nn.Module, points: Tensor, batch_size: int = 256) -> Tensor:
    """Argmax class per cloud; ties resolve to the lower class index."""
    was_training = model.training
    model.eval()
    out: list[Tensor] = []
    try:
        for start in range(0, points.shape[0], batch_size):
            logits = model(points[start : start + batch_size])
            out.append(logits.argmax(dim=-1))
    finally:
        model.train(was_training)
    if not out:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(out)


__all__ = [
    "CLASSIFIER_TYPES",
    "Classifier",
    "EdgeConvMini",
    "PointNetMini",
    "build_classifier",
    "predict",
]
