#!/usr/bin/env python3
"""Hashing, atomic file writes and CSV helpers."""

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from pydantic import BaseModel


def sha256_bytes(data: bytes) -> str:
    """Compute SHA256 hex digest of a byte string."""
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    """Compute SHA256 hex digest of a file, streaming in chunks."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def canonical_json(payload: Any) -> str:
    """Serialise a payload to JSON with sorted keys and no whitespace.

    Pydantic models are dumped in JSON mode first so that the output is stable
    across runs.
    """
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def hash_payload(payload: Any) -> str:
    """Content hash of any JSON-serialisable payload."""
    return sha256_bytes(canonical_json(payload).encode("utf-8"))


def hash_directory(directory: Path, exclude: Sequence[str] = ()) -> dict[str, str]:
    """Hash every file below a directory, keyed by POSIX relative path."""
    hashes: dict[str, str] = {}
    if not directory.exists():
        return hashes
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        rel = path.relative_to(directory).as_posix()
        if any(rel.startswith(prefix) for prefix in exclude):
            continue
        hashes[rel] = sha256_file(path)
    return hashes


def write_bytes_atomic(path: Path, data: bytes) -> None:
    """Write bytes to a file so that readers never observe a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def write_text_atomic(path: Path, text: str) -> None:
    """Write UTF-8 text atomically."""
    write_bytes_atomic(path, text.encode("utf-8"))


def write_json_atomic(path: Path, payload: Any) -> None:
    """Write a JSON document atomically (pretty-printed, sorted keys)."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_csv(
    path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]
) -> None:
    """Write rows to CSV with a fixed column order.

    Floats are written with 6 decimals so that re-runs produce identical bytes.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[list[str]] = [list(columns)]
    for row in rows:
        lines.append([_format_cell(row.get(column)) for column in columns])

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerows(lines)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a CSV file written by write_csv."""
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
