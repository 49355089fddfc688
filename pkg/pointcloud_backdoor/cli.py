#!/usr/bin/env python3
"""CLI interface for pointcloud-backdoor."""

import logging
import sys
import traceback
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, TypeVar, cast, get_args

import click

from .baselines import BASELINE_KINDS, BaselineKind
from .config import load_config
from .errors import BackdoorToolkitError
from .models import ClassifierArch, SweepAxis
from .pipeline import (
    DEFENSE_METHODS,
    SWEEP_AXES,
    DefenseMethod,
    Pipeline,
    StageResult,
    run_sweep,
)
from .report import generate_report

F = TypeVar("F", bound=Callable[..., None])

ARCH_CHOICES = list(get_args(ClassifierArch))


@dataclass
class CliState:
    debug: bool = False


@contextmanager
def _handle_errors(debug: bool) -> Iterator[None]:
    """Print ``Error: ...`` and exit with the error's code."""
    try:
        yield
    except BackdoorToolkitError as e:
        click.echo(f"Error: {e}", err=True)
        if debug:
            traceback.print_exc()
        sys.exit(e.exit_code)
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        if debug:
            traceback.print_exc()
        sys.exit(1)


def run_dir_options(func: F) -> F:
    """Config file and run directory."""
    func = click.option(
        "-o",
        "--output-dir",
        type=click.Path(path_type=Path, file_okay=False),
        default=None,
        help="Run directory (default: output_dir from the config)",
    )(func)
    func = click.option(
        "-c",
        "--config",
        "config_path",
        type=click.Path(path_type=Path, dir_okay=False),
        default=None,
        help="Experiment config TOML (default: built-in defaults)",
    )(func)
    return func


def stage_options(func: F) -> F:
    """Options shared by every stage command."""
    func = click.option(
        "--no-cache",
        is_flag=True,
        help="Ignore the stage cache and always recompute",
    )(func)
    return run_dir_options(func)


def _pipeline(config_path: Optional[Path], output_dir: Optional[Path], no_cache: bool) -> Pipeline:
    config = load_config(config_path)
    return Pipeline(config, output_dir or config.output_dir, use_cache=not no_cache)


def _echo_result(result: StageResult) -> None:
    for line in result.summary:
        click.echo(line)
    if not result.skipped:
        click.echo(f"{result.stage} finished in {result.manifest.timings.get('total', 0.0):.1f}s")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress (INFO level).")
@click.option(
    "--debug",
    is_flag=True,
    default=False,
    help="Show full traceback on errors.",
)
@click.pass_context
def main(ctx: click.Context, verbose: bool, debug: bool) -> None:
    """Clean-label backdoor attacks on point cloud classifiers.

    Each command runs one stage inside a run directory and requires the
    artifacts of the stages before it.
    """
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    logging.getLogger().setLevel(logging.INFO if verbose else logging.WARNING)
    ctx.obj = CliState(debug=debug)


@main.command("gen-data")
@stage_options
@click.option(
    "--from-xyz",
    type=click.Path(path_type=Path, exists=True, file_okay=False),
    default=None,
    help="Ingest DIR/train/<class>/*.xyz and DIR/test/<class>/*.xyz instead of synthesising",
)
@click.pass_obj
def gen_data(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    from_xyz: Optional[Path],
) -> None:
    """Generate (or ingest) the train and test splits."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).gen_data(from_xyz))


@main.command("train-clean")
@stage_options
@click.pass_obj
def train_clean(
    state: CliState, config_path: Optional[Path], output_dir: Optional[Path], no_cache: bool
) -> None:
    """Train the reference classifier on the benign training split."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).train_clean())


@main.command("train-morphnet")
@stage_options
@click.pass_obj
def train_morphnet(
    state: CliState, config_path: Optional[Path], output_dir: Optional[Path], no_cache: bool
) -> None:
    """Train the conditional generator against the frozen reference classifier."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).train_morphnet())


@main.command()
@stage_options
@click.pass_obj
def poison(
    state: CliState, config_path: Optional[Path], output_dir: Optional[Path], no_cache: bool
) -> None:
    """Replace alpha% of each target class with generated clouds (labels unchanged)."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).poison())


@main.command("train-victim")
@stage_options
@click.option(
    "--arch",
    type=click.Choice(ARCH_CHOICES),
    default=None,
    help="Victim architecture (default: victim.arch from the config)",
)
@click.pass_obj
def train_victim(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    arch: Optional[ClassifierArch],
) -> None:
    """Train a victim on the poisoned set and its twin on the benign set."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).train_victim(arch))


@main.command()
@stage_options
@click.option(
    "--arch",
    type=click.Choice(ARCH_CHOICES),
    default=None,
    help="Victim architecture to evaluate (default: victim.arch from the config)",
)
@click.option(
    "--export-samples",
    type=click.IntRange(min=0),
    default=0,
    help="Also write K benign/poisoned pairs per target class to samples/",
)
@click.pass_obj
def evaluate(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    arch: Optional[ClassifierArch],
    export_samples: int,
) -> None:
    """Measure ASR with and without SOR and the clean-accuracy delta."""
    with _handle_errors(state.debug):
        pipeline = _pipeline(config_path, output_dir, no_cache)
        _echo_result(pipeline.evaluate(arch, export_samples))


@main.command()
@stage_options
@click.option(
    "--arch",
    type=click.Choice(ARCH_CHOICES),
    default=None,
    help="Transfer victim architecture (default: transfer.arch from the config)",
)
@click.pass_obj
def transfer(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    arch: Optional[ClassifierArch],
) -> None:
    """Train a victim of another architecture on the same poisoned set and evaluate it."""
    with _handle_errors(state.debug):
        _echo_result(_pipeline(config_path, output_dir, no_cache).transfer(arch))


@main.command()
@stage_options
@click.option(
    "--kind",
    type=click.Choice(list(BASELINE_KINDS)),
    required=True,
    help="Static line trigger, or universal trigger with or without the denoising term",
)
@click.pass_obj
def baseline(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    kind: str,
) -> None:
    """Run a fixed-trigger clean-label baseline attack."""
    with _handle_errors(state.debug):
        pipeline = _pipeline(config_path, output_dir, no_cache)
        _echo_result(pipeline.baseline(cast(BaselineKind, kind)))


@main.command()
@stage_options
@click.option(
    "--method",
    type=click.Choice(list(DEFENSE_METHODS)),
    required=True,
    help="Spectral signature scan, Neural Cleanse, or augmentation-defended training",
)
@click.pass_obj
def defend(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    method: str,
) -> None:
    """Run a defense against the trained victim."""
    with _handle_errors(state.debug):
        pipeline = _pipeline(config_path, output_dir, no_cache)
        _echo_result(pipeline.defend(cast(DefenseMethod, method)))


@main.command()
@stage_options
@click.option(
    "--axis",
    "axes",
    type=click.Choice(list(SWEEP_AXES)),
    multiple=True,
    help="Sweep axis; repeat for several (default: all axes)",
)
@click.option(
    "-j",
    "--jobs",
    type=click.IntRange(min=1),
    default=1,
    help="Sweep points to run concurrently",
)
@click.pass_obj
def sweep(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    no_cache: bool,
    axes: tuple[str, ...],
    jobs: int,
) -> None:
    """Run the ablation sweeps (stack depth, lambda, poison rate, theta)."""
    with _handle_errors(state.debug):
        config = load_config(config_path)
        outcomes = run_sweep(
            config,
            cast(tuple[SweepAxis, ...], axes) or SWEEP_AXES,
            jobs=jobs,
            run_dir=output_dir or config.output_dir,
            use_cache=not no_cache,
        )
        for outcome in outcomes:
            report = outcome.report
            status = " (up to date)" if outcome.skipped else ""
            click.echo(
                f"{outcome.point.axis}/{outcome.point.label}: mASR {report.masr:.2f}%, "
                f"mASR-D {report.masr_defended:.2f}%, "
                f"Chamfer/point {report.reconstruction.chamfer_per_point:.6f}{status}"
            )


@main.command()
@click.argument("run_dir", type=click.Path(path_type=Path))
@click.option(
    "--since",
    type=str,
    default=None,
    help='Only stages completed after this time (e.g., "2 hours ago", "yesterday")',
)
@click.option(
    "--until",
    type=str,
    default=None,
    help='Only stages completed before this time (e.g., "today", "2026-06-08 15:00")',
)
@click.pass_obj
def report(
    state: CliState, run_dir: Path, since: Optional[str], until: Optional[str]
) -> None:
    """Merge the manifests of RUN_DIR into CSV tables and report.md."""
    with _handle_errors(state.debug):
        tables = generate_report(run_dir, since, until)
        click.echo(
            f"Wrote report for {len(tables.runs)} run(s) and {len(tables.summary)} "
            f"attack result(s) to {run_dir}"
        )


@main.command("clear-cache")
@run_dir_options
@click.option(
    "--stage",
    "stage_name",
    default=None,
    help="Forget only this stage (e.g. train-victim-pointnet_mini)",
)
@click.pass_obj
def clear_cache(
    state: CliState,
    config_path: Optional[Path],
    output_dir: Optional[Path],
    stage_name: Optional[str],
) -> None:
    """Forget cached stages of a run directory so they recompute."""
    with _handle_errors(state.debug):
        pipeline = _pipeline(config_path, output_dir, no_cache=False)
        count = pipeline.clear_cache(stage_name)
        click.echo(f"Cleared {count} cached stage(s) for {pipeline.layout.root}")


@main.command("cache-stats")
@run_dir_options
@click.pass_obj
def cache_stats(state: CliState, config_path: Optional[Path], output_dir: Optional[Path]) -> None:
    """Show which stages of a run directory are cached."""
    with _handle_errors(state.debug):
        pipeline = _pipeline(config_path, output_dir, no_cache=False)
        stats = pipeline.cache_stats()
        click.echo(f"Run directory: {pipeline.layout.root}")
        click.echo(f"Tool version: {stats['tool_version']}")
        click.echo(f"Created: {stats['cache_created'] or '-'}")
        click.echo(f"Last updated: {stats['last_updated'] or '-'}")
        stages = stats["cached_stages"]
        click.echo(f"Cached stages ({len(stages)}):")
        for name in stages:
            click.echo(f"  {name}")


if __name__ == "__main__":
    main()
