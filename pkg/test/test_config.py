#!/usr/bin/env python3
"""Tests for loading and overriding experiment configs."""

from pathlib import Path

import pytest

from pointcloud_backdoor.config import (
    dump_config,
    load_config,
    set_dotted,
    validate_config,
    with_overrides,
)
from pointcloud_backdoor.errors import ConfigurationError
from pointcloud_backdoor.models import ExperimentConfig, OutlierParams, StageSeeds


class TestLoadConfig:
    """Reading TOML files."""

    def test_defaults_without_file(self):
        """No file means the built-in defaults."""
        config = load_config(None)
        assert config == ExperimentConfig()
        assert config.morph_train.weights.lambda_ == 0.05
        assert config.poison.alpha == 30.0
        assert config.morph_train.learning_rate == 1e-4

    def test_partial_file(self, tmp_path: Path):
        """Keys that are absent keep their defaults."""
        path = tmp_path / "exp.toml"
        path.write_text('[poison]\nalpha = 10.0\n\n[morph_train.weights]\nlambda = 0.1\n')
        config = load_config(path)
        assert config.poison.alpha == 10.0
        assert config.morph_train.weights.lambda_ == 0.1
        assert config.dataset.num_points == 256

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_malformed_toml(self, tmp_path: Path):
        path = tmp_path / "broken.toml"
        path.write_text("[poison\nalpha = ")
        with pytest.raises(ConfigurationError, match="cannot parse"):
            load_config(path)

    def test_shipped_configs_are_valid(self, smoke_config_path: Path):
        """Every config under configs/ validates."""
        for path in sorted(smoke_config_path.parent.glob("*.toml")):
            load_config(path)


class TestValidation:
    """Errors name the offending field."""

    def test_out_of_range_value(self):
        with pytest.raises(ConfigurationError) as exc_info:
            validate_config({"poison": {"alpha": 150.0}})
        assert exc_info.value.field_path == "poison.alpha"
        assert exc_info.value.exit_code == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as exc_info:
            validate_config({"morphnet": {"blocks": 3}})
        assert exc_info.value.field_path == "morphnet.blocks"

    def test_aliased_field_path(self):
        """The lambda weight is reported under its TOML name."""
        with pytest.raises(ConfigurationError) as exc_info:
            validate_config({"morph_train": {"weights": {"lambda": -1.0}}})
        assert exc_info.value.field_path == "morph_train.weights.lambda"

    def test_seeds_section_is_authoritative(self):
        """Stage sections always carry the seed of the seeds section."""
        config = validate_config({"seeds": {"victim": 41}, "victim": {"train": {"seed": 7}}})
        assert config.victim.train.seed == 41
        assert config.clean_model.train.seed == StageSeeds().clean


class TestEnvironmentOverrides:
    """Only seeds and the output directory follow the environment."""

    def test_base_seed(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_SEED", "100")
        config = load_config(None)
        assert config.seeds == StageSeeds.from_base(100)
        assert config.seeds.data == 100
        assert config.morph_train.seed == 102

    def test_invalid_seed(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_SEED", "abc")
        with pytest.raises(ConfigurationError) as exc_info:
            load_config(None)
        assert exc_info.value.field_path == "seeds"

    def test_output_dir(self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_OUTPUT_DIR", str(tmp_path / "runs"))
        assert load_config(None).output_dir == tmp_path / "runs"


class TestOverrides:
    """Dotted-path overrides used by the sweeps."""

    def test_set_dotted_creates_levels(self):
        data: dict = {}
        set_dotted(data, "morph_train.weights.theta", 0.0)
        assert data == {"morph_train": {"weights": {"theta": 0.0}}}

    def test_with_overrides_revalidates(self):
        base = ExperimentConfig()
        changed = with_overrides(base, {"morph_train.weights.lambda": 0.01, "poison.alpha": 20.0})
        assert changed.morph_train.weights.lambda_ == 0.01
        assert changed.poison.alpha == 20.0
        assert base.poison.alpha == 30.0

    def test_with_overrides_rejects_bad_value(self):
        with pytest.raises(ConfigurationError):
            with_overrides(ExperimentConfig(), {"poison.alpha": -5.0})

    def test_dump_round_trips(self, tmp_path: Path):
        """A dumped config loads back to the same experiment."""
        config = with_overrides(ExperimentConfig(), {"morphnet.n_blocks": 3})
        path = tmp_path / "dumped.toml"
        path.write_text(dump_config(config))
        loaded = load_config(path)
        assert loaded.morphnet == config.morphnet
        assert loaded.morph_train == config.morph_train
        assert loaded.seeds == config.seeds


class TestOutlierParams:
    """The default top-m count scales with the cloud size."""

    @pytest.mark.parametrize(
        "num_points, expected", [(2048, 30), (256, 4), (32, 4), (3, 3), (1024, 15)]
    )
    def test_resolve_m(self, num_points: int, expected: int):
        assert OutlierParams().resolve_m(num_points) == expected

    def test_explicit_m(self):
        assert OutlierParams(m=7).resolve_m(2048) == 7
