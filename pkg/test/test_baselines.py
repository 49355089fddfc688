#!/usr/bin/env python3
"""Tests for the static, PGD-hardened and universal-trigger baselines."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from pydantic import ValidationError

from pointcloud_backdoor.baselines import (
    apply_static_trigger,
    attach_trigger,
    batch_replacement_indices,
    optimize_universal_trigger,
    pgd_perturb,
    replacement_indices,
    run_baseline_attack,
    static_trigger_points,
    trigger_tensor,
)
from pointcloud_backdoor.config import with_overrides
from pointcloud_backdoor.dataset import LabeledDataset
from pointcloud_backdoor.errors import InvalidInputError
from pointcloud_backdoor.models import (
    ExperimentConfig,
    StaticTriggerSpec,
    UniversalTrigger,
    UniversalTriggerConfig,
)
from pointcloud_backdoor.networks import build_classifier

Splits = tuple[LabeledDataset, LabeledDataset]

QUICK_TRIGGER = UniversalTriggerConfig(num_points=4, steps=3, batch_size=4, seed=2)


def _sorted_rows(cloud: torch.Tensor) -> list[tuple[float, ...]]:
    return sorted(tuple(p) for p in cloud.tolist())


def _on_segment(point: torch.Tensor, spec: StaticTriggerSpec) -> bool:
    direction = torch.tensor(spec.direction, dtype=point.dtype)
    along = float(point @ direction)
    off_axis = torch.linalg.vector_norm(point - along * direction).item()
    return off_axis < 1e-5 and 0.0 < along <= spec.extent + 1e-5


class TestStaticTrigger:
    """Fixed line of points along one direction."""

    def test_points_evenly_spaced(self):
        spec = StaticTriggerSpec(num_points=4, direction=(1.0, 0.0, 0.0), extent=2.0)
        points = static_trigger_points(spec)
        assert points[:, 0].tolist() == pytest.approx([0.5, 1.0, 1.5, 2.0])
        assert points[:, 1:].abs().max().item() == 0.0

    def test_single_point_lands_at_extent(self):
        spec = StaticTriggerSpec(num_points=1, extent=1.2)
        expected = 1.2 / math.sqrt(3.0)
        assert static_trigger_points(spec)[0].tolist() == pytest.approx([expected] * 3)

    def test_direction_is_normalised(self):
        spec = StaticTriggerSpec(direction=(0.0, 3.0, 4.0))
        assert spec.direction == pytest.approx((0.0, 0.6, 0.8))

    def test_zero_direction_rejected(self):
        with pytest.raises(ValidationError):
            StaticTriggerSpec(direction=(0.0, 0.0, 0.0))

    def test_cloud_size_preserved(self):
        spec = StaticTriggerSpec(num_points=5)
        cloud = torch.rand(32, 3) * 0.1
        original = cloud.clone()
        triggered = apply_static_trigger(cloud, spec, seed=0)
        assert triggered.shape == cloud.shape
        assert sum(_on_segment(p, spec) for p in triggered) >= 5
        assert torch.equal(cloud, original)

    def test_seeds_change_indices_only(self):
        """Two seeds place the same trigger at different positions."""
        spec = StaticTriggerSpec(num_points=5)
        cloud = torch.zeros(32, 3) - 1.0
        first = apply_static_trigger(cloud, spec, seed=0)
        second = apply_static_trigger(cloud, spec, seed=1)
        assert _sorted_rows(first) == _sorted_rows(second)
        assert not torch.equal(first, second)

    def test_trigger_as_large_as_cloud(self):
        with pytest.raises(InvalidInputError):
            apply_static_trigger(torch.rand(5, 3), StaticTriggerSpec(num_points=5), seed=0)

    def test_replacement_indices_sorted_and_unique(self):
        indices = replacement_indices(64, 10, seed=3)
        assert indices.tolist() == sorted(set(indices.tolist()))
        assert len(indices) == 10


class TestAttachTrigger:
    def test_places_trigger_per_cloud(self):
        clouds = torch.zeros(2, 8, 3)
        trigger = torch.ones(2, 3)
        indices = torch.tensor([[0, 1], [6, 7]])
        out = attach_trigger(clouds, trigger, indices)
        assert out[0, :2].sum().item() == 6.0
        assert out[1, 6:].sum().item() == 6.0
        assert out[0, 2:].abs().sum().item() == 0.0

    def test_gradient_reaches_trigger(self):
        trigger = torch.rand(3, 3, requires_grad=True)
        indices = batch_replacement_indices(4, 10, 3, np.random.default_rng(0))
        out = attach_trigger(torch.rand(4, 10, 3), trigger, indices)
        out.sum().backward()
        assert trigger.grad is not None
        assert torch.equal(trigger.grad, torch.full((3, 3), 4.0))

    def test_empty_batch(self):
        indices = batch_replacement_indices(0, 10, 3, np.random.default_rng(0))
        assert indices.shape == (0, 3)


class TestPgdPerturb:
    """L-infinity bounded hardening against the reference classifier."""

    def test_zero_eps_is_identity(self):
        model = build_classifier("pointnet_mini", 3, 16, seed=0)
        cloud = torch.rand(16, 3)
        assert torch.equal(pgd_perturb(model, cloud, 1, eps=0.0), cloud)

    def test_within_ball(self):
        model = build_classifier("pointnet_mini", 3, 16, seed=0)
        clouds = torch.rand(6, 16, 3)
        perturbed = pgd_perturb(model, clouds, torch.tensor([0, 1, 2, 0, 1, 2]), eps=0.05)
        assert (perturbed - clouds).abs().max().item() <= 0.05 + 1e-6

    def test_raises_true_label_loss(self):
        """Gradient ascent makes the true label less likely on average."""
        model = build_classifier("pointnet_mini", 3, 16, seed=1)
        torch.manual_seed(0)
        clouds = torch.rand(16, 16, 3)
        labels = torch.zeros(16, dtype=torch.long)
        perturbed = pgd_perturb(model, clouds, labels, eps=0.1, steps=10, step_size=0.02)
        with torch.no_grad():
            before = F.cross_entropy(model(clouds), labels).item()
            after = F.cross_entropy(model(perturbed), labels).item()
        assert after > before

    def test_negative_eps(self):
        model = build_classifier("pointnet_mini", 3, 16)
        with pytest.raises(InvalidInputError):
            pgd_perturb(model, torch.rand(16, 3), 0, eps=-0.1)


class TestUniversalTrigger:
    """Optimised trigger points."""

    def test_finite_and_sized(self, tiny_splits: Splits):
        train, _ = tiny_splits
        model = build_classifier("pointnet_mini", 3, 32, seed=0)
        trigger = optimize_universal_trigger(model, train, 1, cfg=QUICK_TRIGGER)
        assert trigger.target == 1
        assert len(trigger.points) == 4
        assert torch.isfinite(trigger_tensor(trigger)).all()
        assert not trigger.with_den

    def test_deterministic(self, tiny_splits: Splits):
        train, _ = tiny_splits
        model = build_classifier("pointnet_mini", 3, 32, seed=0)
        first = optimize_universal_trigger(model, train, 2, with_den=True, cfg=QUICK_TRIGGER)
        second = optimize_universal_trigger(model, train, 2, with_den=True, cfg=QUICK_TRIGGER)
        assert first.points == second.points
        assert first.with_den

    def test_round_trips_through_json(self, tiny_splits: Splits):
        train, _ = tiny_splits
        model = build_classifier("pointnet_mini", 3, 32, seed=0)
        trigger = optimize_universal_trigger(model, train, 0, cfg=QUICK_TRIGGER)
        assert UniversalTrigger.model_validate_json(trigger.model_dump_json()) == trigger

    def test_rejects_non_finite_points(self):
        with pytest.raises(ValidationError):
            UniversalTrigger(target=0, points=[(0.0, float("nan"), 0.0)])

    def test_rejects_empty_points(self):
        with pytest.raises(ValidationError):
            UniversalTrigger(target=0, points=[])


class TestRunBaselineAttack:
    def test_unknown_kind(self, tiny_splits: Splits):
        train, test = tiny_splits
        model = build_classifier("pointnet_mini", 3, 32)
        with pytest.raises(InvalidInputError):
            run_baseline_attack(
                "mirror", ExperimentConfig(), train, test, model, 0.5  # type: ignore[arg-type]
            )

    @pytest.mark.slow
    def test_static_baseline_end_to_end(self, tiny_splits: Splits):
        train, test = tiny_splits
        config = with_overrides(
            ExperimentConfig(),
            {
                "victim.train.epochs": 1,
                "baselines.target_classes": [0, 2],
                "baselines.static.num_points": 4,
                "baselines.pgd.steps": 2,
            },
        )
        reference = build_classifier("pointnet_mini", 3, 32, seed=0)
        outcome = run_baseline_attack("static", config, train, test, reference, 0.5)
        assert outcome.report.kind == "static"
        assert outcome.report.target_classes == [0, 2]
        assert outcome.report.reference_clean_accuracy == pytest.approx(50.0)
        assert outcome.triggers == []
        assert len(outcome.spectral.per_class) == 2
        assert set(outcome.report.provenance.checkpoints) == {"victim_0", "victim_2"}
