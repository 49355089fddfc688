#!/usr/bin/env python3
"""Tests for stage timing utilities."""

import pytest

from pointcloud_backdoor.timings import StageTimer, debug_timing_enabled, log_timing


class TestDebugTimingFlag:
    """Tests for the POINTCLOUD_BACKDOOR_DEBUG_TIMING environment variable."""

    def test_disabled_by_default(self):
        assert debug_timing_enabled() is False

    @pytest.mark.parametrize("value", ["1", "true", "yes", "TRUE"])
    def test_enabled_values(self, monkeypatch: pytest.MonkeyPatch, value: str):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", value)
        assert debug_timing_enabled() is True

    def test_other_values_disable(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", "0")
        assert debug_timing_enabled() is False


class TestLogTiming:
    """Tests for the log_timing context manager."""

    def test_silent_when_disabled(self, capsys: pytest.CaptureFixture[str]):
        with log_timing("phase"):
            pass
        assert capsys.readouterr().out == ""

    def test_prints_when_enabled(
        self, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
    ):
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", "1")
        with log_timing("load data", t_start=0.0):
            pass
        out = capsys.readouterr().out
        assert out.startswith("[TIMING] load data")
        assert "(total:" in out

    def test_callable_phase_name(
        self, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
    ):
        """Callable names are evaluated after the phase ends."""
        monkeypatch.setenv("POINTCLOUD_BACKDOOR_DEBUG_TIMING", "1")
        counter = {"epochs": 0}
        with log_timing(lambda: f"train ({counter['epochs']} epochs)"):
            counter["epochs"] = 3
        assert "train (3 epochs)" in capsys.readouterr().out


class TestStageTimer:
    """Tests for per-phase accumulation."""

    def test_phases_accumulate(self):
        timer = StageTimer("train-clean")
        with timer.phase("train"):
            pass
        with timer.phase("train"):
            pass
        with timer.phase("save"):
            pass
        assert set(timer.timings) == {"train", "save"}
        assert all(v >= 0.0 for v in timer.timings.values())
        assert timer.total() >= timer.timings["train"]

    def test_phase_recorded_on_error(self):
        """A failing phase still records its duration."""
        timer = StageTimer("poison")
        with pytest.raises(RuntimeError):
            with timer.phase("generate"):
                raise RuntimeError("boom")
        assert "generate" in timer.timings
