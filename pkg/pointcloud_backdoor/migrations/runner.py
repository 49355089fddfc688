"""Applies numbered ``.sql`` migrations to the stage cache database."""

import hashlib
import logging
import re
import sqlite3
from datetime import datetime
from pathlib import Path

logger = logging.getLogger(__name__)

_MIGRATION_NAME = re.compile(r"^(\d+)_.*\.sql$")


def _migrations_dir() -> Path:
    return Path(__file__).parent


def _checksum(content: str) -> str:
    return hashlib.sha256(content.encode("utf-8")).hexdigest()


def parse_migration_number(filename: str) -> int:
    """``'001_initial_schema.sql'`` -> 1."""
    match = _MIGRATION_NAME.match(filename)
    if not match:
        raise ValueError(f"Invalid migration filename: {filename}")
    return int(match.group(1))


def _ensure_schema_version_table(conn: sqlite3.Connection) -> None:
    conn.execute(
        """
        CREATE TABLE IF NOT EXISTS _schema_version (
            version INTEGER PRIMARY KEY,
            filename TEXT NOT NULL,
            applied_at TEXT NOT NULL,
            checksum TEXT NOT NULL
        )
        """
    )
    conn.commit()


def available_migrations() -> list[tuple[int, Path]]:
    """Migration files shipped with the package, ordered by number."""
    found: list[tuple[int, Path]] = []
    for path in sorted(_migrations_dir().glob("*.sql")):
        try:
            found.append((parse_migration_number(path.name), path))
        except ValueError:
            continue
    return sorted(found)


def applied_migrations(conn: sqlite3.Connection) -> dict[int, str]:
    """Applied migration numbers mapped to their recorded checksums."""
    _ensure_schema_version_table(conn)
    rows = conn.execute("SELECT version, checksum FROM _schema_version").fetchall()
    return {int(row[0]): str(row[1]) for row in rows}


def verify_migrations(conn: sqlite3.Connection) -> list[str]:
    """Warnings for applied migrations whose file has changed since."""
    applied = applied_migrations(conn)
    warnings: list[str] = []
    for number, path in available_migrations():
        stored = applied.get(number)
        if stored is not None and stored != _checksum(path.read_text(encoding="utf-8")):
            warnings.append(
                f"Migration {number} ({path.name}) changed after it was applied"
            )
    return warnings


def run_migrations(db_path: Path) -> int:
    """Apply pending migrations; return how many were applied."""
    db_path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_path, timeout=30.0)
    conn.execute("PRAGMA foreign_keys = ON")
    try:
        applied = applied_migrations(conn)
        pending = [(n, p) for n, p in available_migrations() if n not in applied]
        for number, path in pending:
            content = path.read_text(encoding="utf-8")
            conn.executescript(content)
            conn.execute(
                "INSERT INTO _schema_version (version, filename, applied_at, checksum) "
                "VALUES (?, ?, ?, ?)",
                (number, path.name, datetime.now().isoformat(), _checksum(content)),
            )
            conn.commit()
            logger.debug("Applied migration %s", path.name)
        for warning in verify_migrations(conn):
            logger.warning(warning)
        return len(pending)
    finally:
        conn.close()


def current_schema_version(conn: sqlite3.Connection) -> int:
    _ensure_schema_version_table(conn)
    row = conn.execute("SELECT MAX(version) FROM _schema_version").fetchone()
    return int(row[0]) if row[0] is not None else 0
