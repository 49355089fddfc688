#!/usr/bin/env python3
"""SQLite-backed stage cache that makes pipeline stages idempotent."""

import logging
import os
import sqlite3
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Generator, Mapping, Optional

from packaging import version

from .migrations.runner import run_migrations

logger = logging.getLogger(__name__)

DEFAULT_CACHE_NAME = ".stage-cache.db"


# ========== Helper Functions ==========


def get_library_version() -> str:
    """Get the installed tool version, falling back to pyproject.toml."""
    try:
        from importlib.metadata import version as get_version

        return get_version("pointcloud-backdoor")
    except Exception:
        pass

    try:
        from importlib import resources
        import toml

        package_root = Path(str(resources.files("pointcloud_backdoor"))).parent
        pyproject_path = package_root / "pyproject.toml"
        if pyproject_path.exists():
            with open(pyproject_path, "r", encoding="utf-8") as f:
                pyproject_data = toml.load(f)
            return pyproject_data.get("project", {}).get("version", "unknown")
    except Exception:
        pass

    return "unknown"


def get_cache_db_path(run_dir: Path) -> Path:
    """Cache database path, respecting POINTCLOUD_BACKDOOR_CACHE_PATH.

    Priority: POINTCLOUD_BACKDOOR_CACHE_PATH env var > ``<run_dir>/.stage-cache.db``.
    """
    env_path = os.getenv("POINTCLOUD_BACKDOOR_CACHE_PATH")
    if env_path:
        return Path(env_path)
    return run_dir / DEFAULT_CACHE_NAME


def is_version_compatible(cached_version: str, current_version: str) -> bool:
    """Whether stage outputs recorded by ``cached_version`` may be reused."""
    if cached_version == current_version:
        return True
    if "unknown" in (cached_version, current_version):
        return False

    # cached version (inclusive upper bound) -> first version that changed outputs
    breaking_changes: dict[str, str] = {
        "0.1.x": "0.2.0",
    }

    try:
        cached = version.parse(cached_version)
        current = version.parse(current_version)
    except version.InvalidVersion:
        return False

    for breaking_pattern, min_required in breaking_changes.items():
        if current < version.parse(min_required):
            continue
        if breaking_pattern.endswith(".x"):
            if str(cached).startswith(breaking_pattern[:-2] + "."):
                return False
        elif cached <= version.parse(breaking_pattern):
            return False
    return True


# ========== Stage Cache ==========


class StageCache:
    """Remembers which stages of a run directory are up to date.

    A stage entry stores the stage input hash and the sha256 of each output
    file (relative to the run directory). A stage is up to date when the
    input hash matches and every recorded output still hashes identically.
    """

    def __init__(
        self,
        run_dir: Path,
        library_version: Optional[str] = None,
        db_path: Optional[Path] = None,
    ):
        self.run_dir = run_dir
        self.library_version = library_version or get_library_version()
        self.db_path = db_path or get_cache_db_path(run_dir)

        run_migrations(self.db_path)
        self._run_id: Optional[int] = None
        self._ensure_run_exists()

    @contextmanager
    def _get_connection(self) -> Generator[sqlite3.Connection, None, None]:
        conn = sqlite3.connect(self.db_path, timeout=30.0)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        conn.execute("PRAGMA journal_mode = WAL")
        try:
            yield conn
        finally:
            conn.close()

    def _run_key(self) -> str:
        return str(self.run_dir.resolve())

    def _ensure_run_exists(self) -> None:
        with self._get_connection() as conn:
            row = conn.execute(
                "SELECT id, tool_version FROM run_dirs WHERE run_path = ?",
                (self._run_key(),),
            ).fetchone()
            if row is None:
                self._run_id = self._create_run(conn)
            elif not is_version_compatible(row["tool_version"], self.library_version):
                logger.warning(
                    "Stage cache written by %s is incompatible with %s, discarding it",
                    row["tool_version"],
                    self.library_version,
                )
                conn.execute("DELETE FROM run_dirs WHERE id = ?", (row["id"],))
                self._run_id = self._create_run(conn)
            else:
                self._run_id = row["id"]
            conn.commit()

    def _create_run(self, conn: sqlite3.Connection) -> int:
        now = datetime.now().isoformat()
        cursor = conn.execute(
            """
            INSERT INTO run_dirs (run_path, tool_version, cache_created, last_updated)
            VALUES (?, ?, ?, ?)
            """,
            (self._run_key(), self.library_version, now, now),
        )
        return cursor.lastrowid or 0

    def recorded_outputs(self, stage: str, input_hash: str) -> Optional[Dict[str, str]]:
        """Output hashes recorded for ``stage`` under ``input_hash``, if any."""
        with self._get_connection() as conn:
            row = conn.execute(
                "SELECT id, input_hash, tool_version FROM stage_runs "
                "WHERE run_id = ? AND stage = ?",
                (self._run_id, stage),
            ).fetchone()
            if row is None or row["input_hash"] != input_hash:
                return None
            if not is_version_compatible(row["tool_version"], self.library_version):
                return None
            outputs = conn.execute(
                "SELECT rel_path, sha256 FROM stage_outputs WHERE stage_run_id = ?",
                (row["id"],),
            ).fetchall()
        return {r["rel_path"]: r["sha256"] for r in outputs}

    def is_up_to_date(
        self, stage: str, input_hash: str, current_outputs: Mapping[str, str]
    ) -> bool:
        """Compare the recorded output hashes against the files on disk now."""
        recorded = self.recorded_outputs(stage, input_hash)
        if not recorded:
            return False
        return all(current_outputs.get(path) == digest for path, digest in recorded.items())

    def record(self, stage: str, input_hash: str, outputs: Mapping[str, str]) -> None:
        """Replace the entry of ``stage`` with a fresh one."""
        now = datetime.now().isoformat()
        with self._get_connection() as conn:
            conn.execute(
                "DELETE FROM stage_runs WHERE run_id = ? AND stage = ?",
                (self._run_id, stage),
            )
            cursor = conn.execute(
                """
                INSERT INTO stage_runs (run_id, stage, input_hash, tool_version, completed_at)
                VALUES (?, ?, ?, ?, ?)
                """,
                (self._run_id, stage, input_hash, self.library_version, now),
            )
            stage_run_id = cursor.lastrowid
            conn.executemany(
                "INSERT INTO stage_outputs (stage_run_id, rel_path, sha256) VALUES (?, ?, ?)",
                [(stage_run_id, path, digest) for path, digest in sorted(outputs.items())],
            )
            conn.execute(
                "UPDATE run_dirs SET last_updated = ? WHERE id = ?", (now, self._run_id)
            )
            conn.commit()

    def forget(self, stage: str) -> int:
        """Drop one stage entry; return 1 if it was cached, else 0."""
        with self._get_connection() as conn:
            cursor = conn.execute(
                "DELETE FROM stage_runs WHERE run_id = ? AND stage = ?",
                (self._run_id, stage),
            )
            conn.commit()
            removed = cursor.rowcount
        return int(removed)

    def clear(self) -> int:
        """Drop every stage entry of this run directory; return how many."""
        with self._get_connection() as conn:
            count = conn.execute(
                "SELECT COUNT(*) AS cnt FROM stage_runs WHERE run_id = ?", (self._run_id,)
            ).fetchone()["cnt"]
            conn.execute("DELETE FROM stage_runs WHERE run_id = ?", (self._run_id,))
            conn.commit()
        return int(count)

    def get_stats(self) -> Dict[str, Any]:
        with self._get_connection() as conn:
            run_row = conn.execute(
                "SELECT * FROM run_dirs WHERE id = ?", (self._run_id,)
            ).fetchone()
            stages = conn.execute(
                "SELECT stage FROM stage_runs WHERE run_id = ? ORDER BY stage",
                (self._run_id,),
            ).fetchall()
        return {
            "tool_version": run_row["tool_version"] if run_row else self.library_version,
            "cached_stages": [row["stage"] for row in stages],
            "cache_created": run_row["cache_created"] if run_row else None,
            "last_updated": run_row["last_updated"] if run_row else None,
        }


__all__ = [
    "StageCache",
    "get_cache_db_path",
    "get_library_version",
    "is_version_compatible",
]
