#!/usr/bin/env python3
"""Tests for the SQLite stage cache."""

from pathlib import Path
from unittest.mock import patch

import pytest

from pointcloud_backdoor.cache import (
    StageCache,
    get_cache_db_path,
    get_library_version,
    is_version_compatible,
)

OUTPUTS = {"data/train/meta.json": "a" * 64, "data/train/points.f32": "b" * 64}


class TestStageCacheBasics:
    """Recording and looking up stage entries."""

    def test_unknown_stage_is_not_up_to_date(self, isolated_stage_cache: StageCache):
        """Nothing is up to date before it has been recorded."""
        assert isolated_stage_cache.recorded_outputs("gen-data", "h1") is None
        assert not isolated_stage_cache.is_up_to_date("gen-data", "h1", OUTPUTS)

    def test_record_then_up_to_date(self, isolated_stage_cache: StageCache):
        """A recorded stage with unchanged outputs is up to date."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        assert isolated_stage_cache.recorded_outputs("gen-data", "h1") == OUTPUTS
        assert isolated_stage_cache.is_up_to_date("gen-data", "h1", OUTPUTS)

    def test_input_hash_change_invalidates(self, isolated_stage_cache: StageCache):
        """A different input hash means the stage must run again."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        assert not isolated_stage_cache.is_up_to_date("gen-data", "h2", OUTPUTS)

    def test_modified_output_invalidates(self, isolated_stage_cache: StageCache):
        """Editing an output file on disk invalidates the entry."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        changed = {**OUTPUTS, "data/train/points.f32": "c" * 64}
        assert not isolated_stage_cache.is_up_to_date("gen-data", "h1", changed)

    def test_deleted_output_invalidates(self, isolated_stage_cache: StageCache):
        """A missing output file invalidates the entry."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        partial = {"data/train/meta.json": OUTPUTS["data/train/meta.json"]}
        assert not isolated_stage_cache.is_up_to_date("gen-data", "h1", partial)

    def test_record_replaces_previous_entry(self, isolated_stage_cache: StageCache):
        """Recording a stage again replaces its outputs."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        isolated_stage_cache.record("gen-data", "h2", {"data/test/meta.json": "d" * 64})
        assert isolated_stage_cache.recorded_outputs("gen-data", "h1") is None
        assert isolated_stage_cache.recorded_outputs("gen-data", "h2") == {
            "data/test/meta.json": "d" * 64
        }

    def test_forget_and_clear(self, isolated_stage_cache: StageCache):
        """Forgetting drops one stage, clearing drops them all."""
        isolated_stage_cache.record("gen-data", "h1", OUTPUTS)
        isolated_stage_cache.record("train-clean", "h2", OUTPUTS)
        assert isolated_stage_cache.forget("gen-data") == 1
        assert isolated_stage_cache.forget("gen-data") == 0
        assert isolated_stage_cache.get_stats()["cached_stages"] == ["train-clean"]
        assert isolated_stage_cache.clear() == 1
        assert isolated_stage_cache.get_stats()["cached_stages"] == []

    def test_stats(self, isolated_stage_cache: StageCache):
        """Stats report the tool version and timestamps."""
        stats = isolated_stage_cache.get_stats()
        assert stats["tool_version"] == "1.0.0-test"
        assert stats["cache_created"] is not None


class TestStageCacheIsolation:
    """Entries are keyed by run directory."""

    def test_run_dirs_do_not_share_entries(self, tmp_path: Path, isolated_db_path: Path):
        """Two run directories in one database stay independent."""
        first = StageCache(tmp_path / "a", "1.0.0", db_path=isolated_db_path)
        second = StageCache(tmp_path / "b", "1.0.0", db_path=isolated_db_path)
        first.record("gen-data", "h1", OUTPUTS)
        assert second.recorded_outputs("gen-data", "h1") is None

    def test_entries_survive_reopen(self, isolated_run_dir: Path, isolated_db_path: Path):
        """A new cache object sees what an earlier one recorded."""
        StageCache(isolated_run_dir, "1.0.0", db_path=isolated_db_path).record(
            "gen-data", "h1", OUTPUTS
        )
        reopened = StageCache(isolated_run_dir, "1.0.0", db_path=isolated_db_path)
        assert reopened.is_up_to_date("gen-data", "h1", OUTPUTS)

    def test_incompatible_version_discards_entries(
        self, isolated_run_dir: Path, isolated_db_path: Path
    ):
        """Upgrading across a breaking version drops the cached stages."""
        StageCache(isolated_run_dir, "0.1.0", db_path=isolated_db_path).record(
            "gen-data", "h1", OUTPUTS
        )
        upgraded = StageCache(isolated_run_dir, "0.2.0", db_path=isolated_db_path)
        assert upgraded.recorded_outputs("gen-data", "h1") is None
        assert upgraded.get_stats()["tool_version"] == "0.2.0"


class TestVersionCompatibility:
    """Tests for cache version checks."""

    def test_same_version(self):
        assert is_version_compatible("0.1.0", "0.1.0")

    def test_patch_upgrade_within_series(self):
        """Patch releases before the breaking version stay compatible."""
        assert is_version_compatible("0.1.0", "0.1.3")

    def test_breaking_change(self):
        """Anything from 0.1.x is invalid once 0.2.0 is installed."""
        assert not is_version_compatible("0.1.4", "0.2.0")
        assert not is_version_compatible("0.1.4", "0.3.1")

    def test_unknown_and_invalid(self):
        """Unknown or unparsable versions are never trusted."""
        assert not is_version_compatible("unknown", "0.1.0")
        assert not is_version_compatible("0.1.0", "unknown")
        assert not is_version_compatible("not a version", "0.1.0")


class TestCachePaths:
    """Tests for locating the cache database."""

    def test_env_override(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
        """POINTCLOUD_BACKDOOR_CACHE_PATH wins over the run directory."""
        target = tmp_path / "elsewhere.db"
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_CACHE_PATH", str(target))
        assert get_cache_db_path(tmp_path / "run") == target

    def test_default_inside_run_dir(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch):
        """Without the variable the database lives inside the run directory."""
        monkeypatch.delenv("POINTCLOUD_BACKDOOR_CACHE_PATH", raising=False)
        assert get_cache_db_path(tmp_path / "run") == tmp_path / "run" / ".stage-cache.db"

    def test_library_version_falls_back(self):
        """Without package metadata the pyproject version (or unknown) is used."""
        with patch("importlib.metadata.version", side_effect=Exception("not installed")):
            detected = get_library_version()
        assert detected in ("0.1.0", "unknown")
