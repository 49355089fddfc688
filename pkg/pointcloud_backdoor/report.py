#!/usr/bin/env python3
"""Merge stage manifests of a run directory into CSV tables and a Markdown summary."""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

import dateparser
from jinja2 import Environment, FileSystemLoader, select_autoescape

from .errors import InvalidInputError, MissingArtifactError
from .models import (
    AttackReport,
    CleanseReport,
    RunManifest,
    SpectralScanResult,
    SweepPoint,
)
from .utils import write_csv, write_text_atomic

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "run",
    "experiment",
    "kind",
    "victim_arch",
    "source_arch",
    "masr",
    "masr_defended",
    "victim_clean_accuracy",
    "reference_clean_accuracy",
    "accuracy_delta",
    "chamfer_mean",
    "chamfer_per_point",
    "outlier_score_mean",
    "spectral_mean_proportion",
]
PER_CLASS_COLUMNS = ["run", "experiment", "target", "asr", "asr_defended", "eligible"]
STACK_DEPTH_COLUMNS = [
    "label",
    "variant",
    "n_blocks",
    "masr",
    "masr_defended",
    "chamfer_mean",
    "chamfer_per_point",
]
LAMBDA_COLUMNS = [
    "lambda",
    "masr",
    "masr_defended",
    "chamfer_mean",
    "chamfer_per_point",
    "victim_clean_accuracy",
]
POISON_RATE_COLUMNS = [
    "alpha",
    "masr",
    "masr_defended",
    "victim_clean_accuracy",
    "reference_clean_accuracy",
    "accuracy_delta",
]
THETA_COLUMNS = [
    "theta",
    "masr",
    "masr_defended",
    "outlier_score_mean",
    "chamfer_per_point",
]

SWEEP_TABLES: dict[str, tuple[str, list[str]]] = {
    "depth": ("stack_depth.csv", STACK_DEPTH_COLUMNS),
    "lambda": ("lambda.csv", LAMBDA_COLUMNS),
    "alpha": ("poison_rate.csv", POISON_RATE_COLUMNS),
    "theta": ("theta.csv", THETA_COLUMNS),
}


# ========== Collection ==========


@dataclass
class RunArtifacts:
    """Completed stages of one run directory (the base run or a sweep point)."""

    name: str
    root: Path
    manifests: list[RunManifest]
    point: Optional[SweepPoint] = None
    attacks: dict[str, AttackReport] = field(default_factory=dict)
    spectral: dict[str, SpectralScanResult] = field(default_factory=dict)
    cleanse: Optional[CleanseReport] = None


@dataclass
class ReportTables:
    summary: list[dict[str, Any]] = field(default_factory=list)
    per_class: list[dict[str, Any]] = field(default_factory=list)
    sweeps: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    runs: list[RunArtifacts] = field(default_factory=list)


def parse_time_bound(text: Optional[str], end_of_day: bool = False) -> Optional[datetime]:
    """Parse a natural-language bound such as ``yesterday`` or ``2 hours ago``."""
    if not text:
        return None
    settings: Any = {"RETURN_AS_TIMEZONE_AWARE": False}
    parsed = dateparser.parse(text, settings=settings)
    if parsed is None:
        raise InvalidInputError(f"Could not parse date: {text}")
    if text in ("today", "yesterday") or "days ago" in text:
        if end_of_day:
            parsed = parsed.replace(hour=23, minute=59, second=59, microsecond=999999)
        else:
            parsed = parsed.replace(hour=0, minute=0, second=0, microsecond=0)
    return parsed


def _in_window(
    manifest: RunManifest, since: Optional[datetime], until: Optional[datetime]
) -> bool:
    completed = datetime.fromisoformat(manifest.completed_at)
    if completed.tzinfo:
        completed = completed.replace(tzinfo=None)
    if since and completed < since:
        return False
    if until and completed > until:
        return False
    return True


def _load_manifests(
    root: Path, since: Optional[datetime], until: Optional[datetime]
) -> list[RunManifest]:
    manifests: list[RunManifest] = []
    for path in sorted((root / "manifests").glob("*.json")):
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        if _in_window(manifest, since, until):
            manifests.append(manifest)
    return manifests


def _attach_reports(run: RunArtifacts) -> None:
    produced = sorted(
        {
            rel
            for manifest in run.manifests
            for rel in manifest.outputs
            if rel.startswith("reports/") and rel.endswith(".json")
        }
    )
    for rel in produced:
        path = run.root / rel
        if not path.exists():
            continue
        stem = path.stem
        text = path.read_text(encoding="utf-8")
        if stem == "defense_cleanse":
            run.cleanse = CleanseReport.model_validate_json(text)
        elif stem == "defense_spectral" or stem.endswith("_spectral"):
            run.spectral[stem] = SpectralScanResult.model_validate_json(text)
        else:
            run.attacks[stem] = AttackReport.model_validate_json(text)


def collect_runs(
    run_dir: Path, since: Optional[str] = None, until: Optional[str] = None
) -> list[RunArtifacts]:
    """Every run under ``run_dir`` with at least one stage completed in the window."""
    if not run_dir.is_dir():
        raise MissingArtifactError(f"run directory not found: {run_dir}")
    since_dt = parse_time_bound(since)
    until_dt = parse_time_bound(until, end_of_day=True)

    candidates: list[tuple[str, Path]] = [(".", run_dir)]
    for point_file in sorted(run_dir.glob("sweeps/*/*/point.json")):
        candidates.append((point_file.parent.relative_to(run_dir).as_posix(), point_file.parent))

    runs: list[RunArtifacts] = []
    for name, root in candidates:
        manifests = _load_manifests(root, since_dt, until_dt)
        if not manifests:
            continue
        point = None
        if (root / "point.json").exists():
            text = (root / "point.json").read_text(encoding="utf-8")
            point = SweepPoint.model_validate_json(text)
        run = RunArtifacts(name=name, root=root, manifests=manifests, point=point)
        _attach_reports(run)
        runs.append(run)

    if not runs:
        window = ""
        if since or until:
            window = f" between {since or 'the beginning'} and {until or 'now'}"
        raise MissingArtifactError(f"empty report: no completed stages under {run_dir}{window}")
    return runs


# ========== Tables ==========


def _spectral_for(run: RunArtifacts, experiment: str) -> Optional[float]:
    scan = run.spectral.get(f"{experiment}_spectral")
    if scan is None and experiment.startswith("morphnet_"):
        scan = run.spectral.get("defense_spectral")
    return scan.mean_proportion if scan is not None else None


def _sweep_row(point: SweepPoint, report: AttackReport) -> dict[str, Any]:
    recon = report.reconstruction
    common: dict[str, Any] = {
        "masr": report.masr,
        "masr_defended": report.masr_defended,
        "chamfer_mean": recon.chamfer_mean,
        "chamfer_per_point": recon.chamfer_per_point,
        "outlier_score_mean": recon.outlier_score_mean,
        "victim_clean_accuracy": report.victim_clean_accuracy,
        "reference_clean_accuracy": report.reference_clean_accuracy,
        "accuracy_delta": report.accuracy_delta,
    }
    if point.axis == "depth":
        return {
            **common, "label": point.label, "variant": point.variant, "n_blocks": point.n_blocks
        }
    return {**common, point.axis: point.value}


def _sweep_order(row: dict[str, Any], axis: str) -> tuple[Any, ...]:
    if axis == "depth":
        return (row["variant"] != "morph", row["n_blocks"])
    return (row[axis],)


def build_tables(runs: list[RunArtifacts]) -> ReportTables:
    tables = ReportTables(runs=runs)
    for run in runs:
        for experiment, report in sorted(run.attacks.items()):
            recon = report.reconstruction
            tables.summary.append(
                {
                    "run": run.name,
                    "experiment": experiment,
                    "kind": report.kind,
                    "victim_arch": report.victim_arch,
                    "source_arch": report.source_arch,
                    "masr": report.masr,
                    "masr_defended": report.masr_defended,
                    "victim_clean_accuracy": report.victim_clean_accuracy,
                    "reference_clean_accuracy": report.reference_clean_accuracy,
                    "accuracy_delta": report.accuracy_delta,
                    "chamfer_mean": recon.chamfer_mean,
                    "chamfer_per_point": recon.chamfer_per_point,
                    "outlier_score_mean": recon.outlier_score_mean,
                    "spectral_mean_proportion": _spectral_for(run, experiment),
                }
            )
            for result in report.per_class:
                tables.per_class.append(
                    {"run": run.name, "experiment": experiment, **result.model_dump()}
                )
            if run.point is not None and experiment.startswith("morphnet_"):
                tables.sweeps.setdefault(run.point.axis, []).append(_sweep_row(run.point, report))

    for axis, rows in tables.sweeps.items():
        rows.sort(key=lambda row: _sweep_order(row, axis))
    return tables


# ========== Output ==========


def get_template_environment() -> Environment:
    templates_dir = Path(__file__).parent / "templates"
    env = Environment(
        loader=FileSystemLoader(templates_dir),
        autoescape=select_autoescape(["html", "xml"]),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["pct"] = lambda value: "" if value is None else f"{value:.2f}"
    env.filters["num"] = lambda value: "" if value is None else f"{value:.6f}"
    return env


def render_markdown(tables: ReportTables) -> str:
    template = get_template_environment().get_template("report.md.j2")
    cleanse = [(run.name, run.cleanse) for run in tables.runs if run.cleanse is not None]
    spectral = [
        (run.name, name, scan)
        for run in tables.runs
        for name, scan in sorted(run.spectral.items())
    ]
    return template.render(
        summary=tables.summary,
        sweeps=tables.sweeps,
        sweep_files={axis: SWEEP_TABLES[axis][0] for axis in tables.sweeps},
        stage_count=sum(len(run.manifests) for run in tables.runs),
        run_count=len(tables.runs),
        cleanse=cleanse,
        spectral=spectral,
    )


def write_report_tables(run_dir: Path, tables: ReportTables) -> list[Path]:
    """Write every table (empty ones with their header only) and ``report.md``."""
    written: list[Path] = []
    write_csv(run_dir / "summary.csv", SUMMARY_COLUMNS, tables.summary)
    written.append(run_dir / "summary.csv")
    write_csv(run_dir / "per_class.csv", PER_CLASS_COLUMNS, tables.per_class)
    written.append(run_dir / "per_class.csv")
    for axis, (filename, columns) in SWEEP_TABLES.items():
        write_csv(run_dir / filename, columns, tables.sweeps.get(axis, []))
        written.append(run_dir / filename)
    write_text_atomic(run_dir / "report.md", render_markdown(tables))
    written.append(run_dir / "report.md")
    return written


def generate_report(
    run_dir: Path, since: Optional[str] = None, until: Optional[str] = None
) -> ReportTables:
    tables = build_tables(collect_runs(run_dir, since, until))
    write_report_tables(run_dir, tables)
    logger.info(
        "Report over %d run(s): %d attack report(s)", len(tables.runs), len(tables.summary)
    )
    return tables


__all__ = [
    "PER_CLASS_COLUMNS",
    "SUMMARY_COLUMNS",
    "SWEEP_TABLES",
    "ReportTables",
    "RunArtifacts",
    "build_tables",
    "collect_runs",
    "generate_report",
    "parse_time_bound",
    "render_markdown",
    "write_report_tables",
]
