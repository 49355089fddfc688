#!/usr/bin/env python3
"""Point-cloud primitives: distances, neighbourhoods, outlier statistics, SOR.

Every function accepts a single cloud shaped ``(N, 3)`` or a batch shaped
``(B, N, 3)`` and returns results with the batch dimension matching the input.
Distances and scores are differentiable with respect to the coordinates;
neighbour and top-m index selection is computed without gradient and treated
as constant within a forward pass.
"""

from typing import Optional, Union

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidInputError
from .models import OutlierParams

CloudLike = Union[Tensor, np.ndarray]


def as_cloud_tensor(cloud: CloudLike) -> Tensor:
    """Convert an array to a tensor and check the ``(..., N, 3)`` contract."""
    tensor = torch.as_tensor(cloud)
    if tensor.dim() not in (2, 3) or tensor.shape[-1] != 3:
        raise InvalidInputError(
            f"expected a point cloud shaped (N, 3) or (B, N, 3), got {tuple(tensor.shape)}"
        )
    if tensor.shape[-2] == 0:
        raise InvalidInputError("point cloud is empty")
    if not tensor.is_floating_point():
        tensor = tensor.to(torch.float32)
    return tensor


def _batched(cloud: CloudLike) -> tuple[Tensor, bool]:
    tensor = as_cloud_tensor(cloud)
    if tensor.dim() == 2:
        return tensor.unsqueeze(0), True
    return tensor, False


def _check_k(k: int, num_points: int) -> None:
    if k < 1 or k >= num_points:
        raise InvalidInputError(f"k must satisfy 1 <= k < N (k={k}, N={num_points})")


def pairwise_sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Exact squared distances between every point of ``a`` and ``b``.

    Computed from coordinate differences rather than the expanded
    ``|a|^2 - 2ab + |b|^2`` form so that coincident points give exactly zero.
    """
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(dim=-1)


# ========== Chamfer ==========


def chamfer_distance(a: CloudLike, b: CloudLike) -> Tensor:
    """Symmetric Chamfer distance with squared nearest-neighbour terms.

    Returns a scalar for single clouds and a ``(B,)`` tensor for batches.
    """
    ta, single_a = _batched(a)
    tb, single_b = _batched(b)
    if ta.shape[0] != tb.shape[0]:
        raise InvalidInputError(
            f"batch sizes differ: {ta.shape[0]} vs {tb.shape[0]}"
        )
    tb = tb.to(ta.dtype)
    dist = pairwise_sq_distances(ta, tb)
    forward = dist.min(dim=-1).values.sum(dim=-1)
    backward = dist.min(dim=-2).values.sum(dim=-1)
    total = forward + backward
    return total[0] if (single_a and single_b) else total


def chamfer_per_point(a: CloudLike, b: CloudLike) -> Tensor:
    """Chamfer distance divided by the total number of points in both clouds."""
    ta = as_cloud_tensor(a)
    tb = as_cloud_tensor(b)
    return chamfer_distance(ta, tb) / float(ta.shape[-2] + tb.shape[-2])


# ========== Neighbourhoods ==========


def knn_indices(cloud: CloudLike, k: int) -> Tensor:
    """Indices of the k nearest other points of every point.

    Ties are broken by the lower point index. Output shape is ``(..., N, k)``.
    """
    tensor, single = _batched(cloud)
    num_points = tensor.shape[-2]
    _check_k(k, num_points)
    with torch.no_grad():
        dist = pairwise_sq_distances(tensor, tensor)
        eye = torch.eye(num_points, dtype=torch.bool, device=tensor.device)
        dist = dist.masked_fill(eye, float("inf"))
        order = torch.sort(dist, dim=-1, stable=True).indices[..., :k]
    return order[0] if single else order


def gather_neighbors(cloud: Tensor, indices: Tensor) -> Tensor:
    """Gather ``(B, N, k, F)`` neighbour rows of ``(B, N, F)`` features."""
    batch = torch.arange(cloud.shape[0], device=cloud.device).view(-1, 1, 1)
    return cloud[batch, indices]


def neighbor_distances(cloud: CloudLike, k: int) -> Tensor:
    """Euclidean distances from every point to its k nearest neighbours."""
    tensor, single = _batched(cloud)
    idx = knn_indices(tensor, k)
    neighbours = gather_neighbors(tensor, idx)
    dist = torch.linalg.vector_norm(neighbours - tensor.unsqueeze(-2), dim=-1)
    return dist[0] if single else dist


def point_outlier_scores(cloud: CloudLike, k: int) -> Tensor:
    """Average k-NN distance D(p_i) of every point, shape ``(..., N)``."""
    return neighbor_distances(cloud, k).mean(dim=-1)


def avg_knn_distance(cloud: CloudLike, i: int, k: int) -> Tensor:
    """Average distance of point ``i`` to its k nearest neighbours."""
    tensor = as_cloud_tensor(cloud)
    num_points = tensor.shape[-2]
    if not 0 <= i < num_points:
        raise InvalidInputError(f"point index {i} out of range for N={num_points}")
    return point_outlier_scores(tensor, k)[..., i]


def outlier_score(
    cloud: CloudLike, params: Optional[OutlierParams] = None
) -> Tensor:
    """Mean D(p_i) over the m points with the largest D (ties by lower index)."""
    params = params or OutlierParams()
    tensor, single = _batched(cloud)
    num_points = tensor.shape[-2]
    m = params.resolve_m(num_points)
    if m < 1 or m > num_points:
        raise InvalidInputError(f"m must satisfy 1 <= m <= N (m={m}, N={num_points})")

    scores = point_outlier_scores(tensor, params.k)
    with torch.no_grad():
        top = torch.sort(-scores, dim=-1, stable=True).indices[..., :m]
    result = scores.gather(-1, top).mean(dim=-1)
    return result[0] if single else result


# ========== Filtering and Normalisation ==========


def sor_filter(cloud: CloudLike, k: int = 2, alpha: float = 1.1) -> Tensor:
    """Statistical outlier removal on a single cloud.

    Drops points whose average k-NN distance exceeds ``mu + alpha * sigma``
    (population standard deviation). Surviving points keep their order. If
    every point would be removed the input is returned unchanged.
    """
    tensor = as_cloud_tensor(cloud)
    if tensor.dim() != 2:
        raise InvalidInputError("sor_filter works on one cloud at a time")
    _check_k(k, tensor.shape[0])
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")

    with torch.no_grad():
        scores = point_outlier_scores(tensor.to(torch.float64), k)
        mu = scores.mean()
        sigma = scores.std(unbiased=False)
        keep = scores <= mu + alpha * sigma
    if not bool(keep.any()):
        return tensor
    return tensor[keep]


def repeat_to_size(cloud: CloudLike, num_points: int) -> Tensor:
    """Cycle through the points of a non-empty cloud until it holds ``num_points``.

    Used to feed SOR output back to classifiers built for a fixed N. Max-pooled
    features are unchanged by the duplicates.
    """
    tensor = as_cloud_tensor(cloud)
    if tensor.dim() != 2 or tensor.shape[0] == 0:
        raise InvalidInputError(f"expected one non-empty cloud, got {tuple(tensor.shape)}")
    if tensor.shape[0] > num_points:
        raise InvalidInputError(
            f"cloud has {tensor.shape[0]} points, more than the requested {num_points}"
        )
    return tensor[torch.arange(num_points) % tensor.shape[0]]


def sor_filter_batch(
    clouds: CloudLike, k: int = 2, alpha: float = 1.1
) -> list[Tensor]:
    """Apply :func:`sor_filter` to every cloud of a batch."""
    tensor, _ = _batched(clouds)
    return [sor_filter(c, k, alpha) for c in tensor]


def normalize_unit_sphere(cloud: CloudLike) -> Tensor:
    """Centre on the centroid and scale so that the largest norm is 1.

    A cloud whose points all coincide maps to all zeros.
    """
    tensor, single = _batched(cloud)
    centered = tensor - tensor.mean(dim=-2, keepdim=True)
    radius = torch.linalg.vector_norm(centered, dim=-1).amax(dim=-1, keepdim=True)
    radius = radius.unsqueeze(-1)
    scaled = torch.where(
        radius > 0,
        centered / radius.clamp_min(torch.finfo(tensor.dtype).tiny),
        torch.zeros_like(centered),
    )
    return scaled[0] if single else scaled


__all__ = [
    "as_cloud_tensor",
    "avg_knn_distance",
    "chamfer_distance",
    "chamfer_per_point",
    "gather_neighbors",
    "knn_indices",
    "neighbor_distances",
    "normalize_unit_sphere",
    "outlier_score",
    "pairwise_sq_distances",
    "point_outlier_scores",
    "repeat_to_size",
    "sor_filter",
    "sor_filter_batch",
]
