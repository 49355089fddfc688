#!/usr/bin/env python3
"""Tests for point-cloud primitives against brute-force oracles."""

import itertools

import numpy as np
import pytest
import torch

from pointcloud_backdoor.errors import InvalidInputError
from pointcloud_backdoor.geometry import (
    avg_knn_distance,
    chamfer_distance,
    chamfer_per_point,
    knn_indices,
    normalize_unit_sphere,
    outlier_score,
    point_outlier_scores,
    repeat_to_size,
    sor_filter,
    sor_filter_batch,
)
from pointcloud_backdoor.models import OutlierParams

COLINEAR = torch.tensor(
    [[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0], [10.0, 0, 0]], dtype=torch.float64
)


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    forward = sum(min(float(np.sum((p - q) ** 2)) for q in b) for p in a)
    backward = sum(min(float(np.sum((p - q) ** 2)) for p in a) for q in b)
    return forward + backward


def brute_knn(cloud: np.ndarray, k: int) -> list[list[int]]:
    result = []
    for i, p in enumerate(cloud):
        others = [(float(np.linalg.norm(p - q)), j) for j, q in enumerate(cloud) if j != i]
        result.append([j for _, j in sorted(others)[:k]])
    return result


class TestChamferDistance:
    """Symmetric squared-distance Chamfer."""

    def test_identity_is_zero(self):
        cloud = torch.rand(16, 3, dtype=torch.float64)
        assert chamfer_distance(cloud, cloud).item() == 0.0

    def test_analytic_example(self):
        """{(0,0,0),(1,0,0)} against {(0,0,0)} gives 0 + 1 + 0."""
        a = torch.tensor([[0.0, 0, 0], [1.0, 0, 0]])
        b = torch.tensor([[0.0, 0, 0]])
        assert chamfer_distance(a, b).item() == pytest.approx(1.0)

    def test_matches_brute_force(self):
        """Random 8-point vs 5-point clouds agree with a double loop."""
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal((5, 3))
        value = chamfer_distance(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert value == pytest.approx(brute_chamfer(a, b), rel=1e-10)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = torch.from_numpy(rng.standard_normal((11, 3)))
        b = torch.from_numpy(rng.standard_normal((7, 3)))
        assert chamfer_distance(a, b).item() == pytest.approx(chamfer_distance(b, a).item())

    def test_batched(self):
        """A batch gives one value per pair of clouds."""
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 6, 3))
        b = rng.standard_normal((3, 4, 3))
        values = chamfer_distance(torch.from_numpy(a), torch.from_numpy(b))
        assert values.shape == (3,)
        for i in range(3):
            assert values[i].item() == pytest.approx(brute_chamfer(a[i], b[i]))

    def test_per_point_normalisation(self):
        a = torch.tensor([[0.0, 0, 0], [1.0, 0, 0]])
        b = torch.tensor([[0.0, 0, 0]])
        assert chamfer_per_point(a, b).item() == pytest.approx(1.0 / 3.0)

    def test_gradient_matches_finite_differences(self):
        """Analytic gradients agree with central differences."""
        torch.manual_seed(0)
        a = torch.rand(6, 3, dtype=torch.float64, requires_grad=True)
        b = torch.rand(5, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(chamfer_distance, (a, b), eps=1e-6, atol=1e-6, rtol=1e-4)

    def test_empty_cloud_rejected(self):
        with pytest.raises(InvalidInputError):
            chamfer_distance(torch.zeros(0, 3), torch.zeros(2, 3))

    def test_wrong_shape_rejected(self):
        with pytest.raises(InvalidInputError):
            chamfer_distance(torch.zeros(4, 2), torch.zeros(4, 2))


class TestKnnIndices:
    """Nearest-neighbour selection with lower-index tie breaking."""

    def test_colinear_far_point(self):
        """The point at x=10 sees x=3, x=2, x=1 in that order."""
        assert knn_indices(COLINEAR, 3)[4].tolist() == [3, 2, 1]

    def test_coincident_partner_first(self):
        cloud = torch.tensor([[0.0, 0, 0], [5.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        idx = knn_indices(cloud, 2)
        assert idx[0, 0].item() == 2
        assert idx[2, 0].item() == 0

    def test_ties_broken_by_lower_index(self):
        """Equidistant neighbours come out in index order."""
        cloud = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0.0, 1.0, 0]])
        assert knn_indices(cloud, 3)[0].tolist() == [1, 2, 3]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(7)
        cloud = rng.standard_normal((20, 3))
        idx = knn_indices(torch.from_numpy(cloud), 4)
        assert idx.tolist() == brute_knn(cloud, 4)

    def test_never_contains_self(self):
        idx = knn_indices(torch.rand(2, 12, 3), 5)
        assert idx.shape == (2, 12, 5)
        for b in range(2):
            for i in range(12):
                assert i not in idx[b, i].tolist()

    @pytest.mark.parametrize("k", [0, 5, 6])
    def test_invalid_k(self, k: int):
        with pytest.raises(InvalidInputError):
            knn_indices(COLINEAR, k)


class TestAvgKnnDistance:
    """Unsquared average neighbour distance of one point."""

    def test_colinear_far_point(self):
        assert avg_knn_distance(COLINEAR, 4, 3).item() == pytest.approx(8.0)

    def test_equilateral_triangle(self):
        s = 2.5
        triangle = torch.tensor(
            [[0.0, 0, 0], [s, 0, 0], [s / 2, s * np.sqrt(3) / 2, 0]], dtype=torch.float64
        )
        for i in range(3):
            assert avg_knn_distance(triangle, i, 2).item() == pytest.approx(s)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        cloud = rng.standard_normal((15, 3))
        scores = point_outlier_scores(torch.from_numpy(cloud), 3)
        for i in range(15):
            dists = sorted(
                float(np.linalg.norm(cloud[i] - q)) for j, q in enumerate(cloud) if j != i
            )
            assert scores[i].item() == pytest.approx(sum(dists[:3]) / 3)

    def test_index_out_of_range(self):
        with pytest.raises(InvalidInputError):
            avg_knn_distance(COLINEAR, 5, 2)


class TestOutlierScore:
    """Mean D over the m most isolated points."""

    def test_colinear_top_two(self):
        """D values are 2, 4/3, 4/3, 2, 8; the top two are 8 and the first 2."""
        score = outlier_score(COLINEAR, OutlierParams(k=3, m=2))
        assert score.item() == pytest.approx(5.0)

    def test_m_equals_n_is_mean(self):
        score = outlier_score(COLINEAR, OutlierParams(k=3, m=5))
        expected = (2.0 + 4.0 / 3 + 4.0 / 3 + 2.0 + 8.0) / 5
        assert score.item() == pytest.approx(expected)

    def test_moving_outlier_inward_lowers_score(self):
        grid = torch.tensor(
            list(itertools.product([-1.0, 0.0, 1.0], repeat=3)), dtype=torch.float64
        )
        far = torch.cat([grid, torch.tensor([[10.0, 0.0, 0.0]], dtype=torch.float64)])
        near = torch.cat([grid, torch.tensor([[5.0, 0.0, 0.0]], dtype=torch.float64)])
        params = OutlierParams(k=3)
        assert outlier_score(near, params).item() < outlier_score(far, params).item()

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        cloud = torch.from_numpy(rng.standard_normal((30, 3)))
        perm = torch.from_numpy(rng.permutation(30))
        params = OutlierParams(k=3, m=6)
        assert outlier_score(cloud[perm], params).item() == pytest.approx(
            outlier_score(cloud, params).item()
        )

    def test_batched_shape(self):
        assert outlier_score(torch.rand(4, 20, 3)).shape == (4,)

    def test_differentiable(self):
        cloud = torch.rand(20, 3, dtype=torch.float64, requires_grad=True)
        outlier_score(cloud, OutlierParams(k=3, m=4)).backward()
        assert cloud.grad is not None
        assert torch.isfinite(cloud.grad).all()

    def test_m_larger_than_n(self):
        with pytest.raises(InvalidInputError):
            outlier_score(COLINEAR, OutlierParams(k=2, m=6))


class TestSorFilter:
    """Statistical outlier removal."""

    def test_removes_distant_point(self):
        rng = np.random.default_rng(10)
        sphere = rng.standard_normal((50, 3))
        sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
        cloud = torch.from_numpy(np.vstack([sphere, [[10.0, 0.0, 0.0]]]))

        scores = point_outlier_scores(cloud, 2)
        threshold = scores.mean() + 1.1 * scores.std(unbiased=False)
        assert scores[-1] > threshold

        filtered = sor_filter(cloud, k=2, alpha=1.1)
        assert not any(torch.allclose(p, cloud[-1]) for p in filtered)

    def test_identical_points_survive(self):
        cloud = torch.ones(10, 3)
        assert torch.equal(sor_filter(cloud), cloud)

    def test_output_is_subsequence(self):
        rng = np.random.default_rng(11)
        cloud = torch.from_numpy(rng.standard_normal((40, 3)))
        filtered = sor_filter(cloud)
        assert filtered.shape[0] <= cloud.shape[0]
        positions = [
            next(i for i in range(cloud.shape[0]) if torch.equal(cloud[i], p)) for p in filtered
        ]
        assert positions == sorted(positions)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_repeated_filtering_never_grows(self, seed: int):
        cloud = torch.from_numpy(np.random.default_rng(seed).standard_normal((64, 3)))
        once = sor_filter(cloud)
        twice = sor_filter(once)
        assert twice.shape[0] <= once.shape[0] <= cloud.shape[0]

    def test_batch(self):
        results = sor_filter_batch(torch.rand(3, 16, 3))
        assert len(results) == 3

    def test_invalid_alpha(self):
        with pytest.raises(InvalidInputError):
            sor_filter(COLINEAR, k=2, alpha=0.0)

    def test_repeat_to_size_cycles_points(self):
        cloud = torch.arange(9, dtype=torch.float64).reshape(3, 3)
        padded = repeat_to_size(cloud, 7)
        assert padded.shape == (7, 3)
        assert torch.equal(padded[:3], cloud)
        assert torch.equal(padded[6], cloud[0])

    def test_repeat_to_size_rejects_shrinking(self):
        with pytest.raises(InvalidInputError):
            repeat_to_size(torch.rand(8, 3), 4)


class TestNormalizeUnitSphere:
    """Centring and scaling to the unit ball."""

    def test_two_points(self):
        cloud = torch.tensor([[0.0, 0, 0], [2.0, 0, 0]])
        expected = torch.tensor([[-1.0, 0, 0], [1.0, 0, 0]])
        assert torch.allclose(normalize_unit_sphere(cloud), expected)

    def test_unit_radius_and_centred(self):
        cloud = torch.rand(50, 3, dtype=torch.float64) * 7 + 3
        out = normalize_unit_sphere(cloud)
        assert torch.linalg.vector_norm(out, dim=-1).max().item() == pytest.approx(1.0)
        assert torch.allclose(out.mean(dim=0), torch.zeros(3, dtype=torch.float64), atol=1e-6)

    def test_idempotent(self):
        once = normalize_unit_sphere(torch.rand(30, 3, dtype=torch.float64))
        assert torch.allclose(normalize_unit_sphere(once), once, atol=1e-6)

    def test_degenerate_cloud(self):
        assert torch.equal(normalize_unit_sphere(torch.full((5, 3), 2.0)), torch.zeros(5, 3))
