"""Pytest configuration and shared fixtures."""

from pathlib import Path
from typing import TYPE_CHECKING, Generator

import pytest

if TYPE_CHECKING:
    from pointcloud_backdoor.cache import StageCache
    from pointcloud_backdoor.dataset import LabeledDataset
    from pointcloud_backdoor.models import DatasetSpec, ExperimentConfig

REPO_ROOT = Path(__file__).parent.parent


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    """Keep the developer's environment variables out of every test."""
    monkeypatch.delenv("POINTCLOUD_BACKDOOR_SEED", raising=False)
    monkeypatch.delenv("POINTCLOUD_BACKDOOR_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", raising=False)
    monkeypatch.setenv("POINTCLOUD_BACKDOOR_CACHE_PATH", str(tmp_path / "stage-cache.db"))


# ========== Cache Test Fixtures ==========
# These fixtures use explicit db_path for true test isolation,
# enabling parallel test execution without database conflicts.


@pytest.fixture
def isolated_run_dir(tmp_path: Path) -> Path:
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    return run_dir


@pytest.fixture
def isolated_db_path(tmp_path: Path) -> Path:
    """Return an isolated database path for cache tests."""
    return tmp_path / "test-cache.db"


@pytest.fixture
def isolated_stage_cache(
    isolated_run_dir: Path, isolated_db_path: Path
) -> Generator["StageCache", None, None]:
    from pointcloud_backdoor.cache import StageCache

    yield StageCache(isolated_run_dir, "1.0.0-test", db_path=isolated_db_path)


# ========== Dataset Fixtures ==========


@pytest.fixture
def tiny_spec() -> "DatasetSpec":
    """Three well separated families, small enough for CPU training in tests."""
    from pointcloud_backdoor.models import DatasetSpec

    return DatasetSpec(
        families=["sphere", "cube", "torus"],
        samples_per_class=8,
        test_per_class=4,
        num_points=32,
        noise_sigma=0.0,
    )


@pytest.fixture
def tiny_splits(tiny_spec: "DatasetSpec") -> tuple["LabeledDataset", "LabeledDataset"]:
    from pointcloud_backdoor.dataset import generate_synthetic_splits

    return generate_synthetic_splits(tiny_spec, seed=0)


@pytest.fixture
def test_data_dir() -> Path:
    """Return path to test data directory."""
    return Path(__file__).parent / "test_data"


@pytest.fixture
def smoke_config_path() -> Path:
    """The smallest end-to-end experiment shipped with the repo."""
    return REPO_ROOT / "configs" / "smoke.toml"


@pytest.fixture
def ordering_config() -> "ExperimentConfig":
    """Schedules long enough on the tiny corpus for attack and defense orderings to show."""
    from pointcloud_backdoor.config import with_overrides
    from pointcloud_backdoor.models import ExperimentConfig

    schedule = {"optimizer": "adam", "learning_rate": 0.01, "batch_size": 8, "lr_milestones": []}
    overrides: dict[str, object] = {
        "morph_train.epochs": 10,
        "morph_train.batch_size": 8,
        "morphnet.knn_k": 4,
        "poison.alpha": 50.0,
        "poison.batch_size": 16,
        "baselines.static.num_points": 4,
        "baselines.pgd.steps": 2,
        "baselines.universal.num_points": 4,
        "baselines.universal.steps": 20,
        "baselines.universal.batch_size": 8,
        "defenses.cleanse.steps": 30,
        "defenses.cleanse.batch_size": 8,
    }
    for section in ("clean_model.train", "victim.train"):
        overrides.update({f"{section}.{key}": value for key, value in schedule.items()})
        overrides[f"{section}.epochs"] = 10
    return with_overrides(ExperimentConfig(), overrides)
