#!/usr/bin/env python3
"""Stage orchestration behind the command surface.

A run directory holds every artifact of one experiment::

    data/train, data/test            datasets
    models/clean, models/morphnet    reference classifier and generator
    data/poisoned                    poisoned training set
    models/victim_<arch>             victim trained on the poisoned set
    models/twin_<arch>               benign-trained twin of the victim
    models/triggers                  optimised baseline triggers
    reports/                         JSON reports and flat CSVs
    samples/                         exported benign/poisoned pairs
    logs/                            training histories
    manifests/<stage>.json           one RunManifest per completed stage
    sweeps/<axis>/<label>/           one sub-run per sweep point

Stages never build their upstream artifacts. A stage whose inputs hash
identically to its last run, and whose outputs are unchanged on disk, is
skipped.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Optional, Sequence

from .attack import (
    evaluate_against_twin,
    evaluate_attack,
    export_samples,
    poison_training_set,
    resolve_targets,
    stage,
    train_victim_pair,
    transfer_eval,
    write_report,
)
from .baselines import BASELINE_KINDS, BaselineKind, run_baseline_attack
from .cache import StageCache, get_library_version
from .config import validate_config, with_overrides
from .dataset import (
    generate_synthetic_splits,
    ingest_xyz_tree,
    load_dataset,
    save_dataset,
)
from .defenses import defended_training, neural_cleanse, spectral_scan_all
from .errors import InvalidInputError, MissingArtifactError
from .models import (
    AttackReport,
    AugmentSwitches,
    ClassifierArch,
    CleanseReport,
    ExperimentConfig,
    Provenance,
    RunManifest,
    SweepAxis,
    SweepPoint,
)
from .networks import load_classifier, load_morphnet, model_digest, save_checkpoint
from .timings import StageTimer
from .training import accuracy, train_classifier, train_morphnet
from .utils import hash_directory, hash_payload, sha256_file, write_csv, write_json_atomic

logger = logging.getLogger(__name__)

DefenseMethod = Literal["spectral", "cleanse", "augment"]
DEFENSE_METHODS = ("spectral", "cleanse", "augment")
SWEEP_AXES: tuple[SweepAxis, ...] = ("depth", "lambda", "alpha", "theta")

# Upstream artifacts a sweep point reuses from the base run.
SHARED_ARTIFACTS: dict[str, frozenset[str]] = {
    "depth": frozenset({"data", "clean"}),
    "lambda": frozenset({"data", "clean"}),
    "theta": frozenset({"data", "clean"}),
    "alpha": frozenset({"data", "clean", "morphnet"}),
}

# Command that produces each named stage input.
PRODUCERS: dict[str, str] = {
    "train": "gen-data",
    "test": "gen-data",
    "clean": "train-clean",
    "morphnet": "train-morphnet",
    "poisoned": "poison",
    "victim": "train-victim",
    "twin": "train-victim",
}

SPECTRAL_COLUMNS = ["target", "records", "poisoned", "candidates", "proportion"]
CLEANSE_COLUMNS = ["model", "target", "norm", "anomaly_index", "flagged"]


# =============================================================================
# Run Layout
# =============================================================================


@dataclass(frozen=True)
class RunLayout:
    """Paths of one run directory, optionally borrowing artifacts from a base run."""

    root: Path
    shared: Optional["RunLayout"] = None
    shared_artifacts: frozenset[str] = frozenset()

    def _owner(self, artifact: str) -> Path:
        if self.shared is not None and artifact in self.shared_artifacts:
            return self.shared._owner(artifact)
        return self.root

    def is_shared(self, artifact: str) -> bool:
        return self.shared is not None and artifact in self.shared_artifacts

    @property
    def train_dir(self) -> Path:
        return self._owner("data") / "data" / "train"

    @property
    def test_dir(self) -> Path:
        return self._owner("data") / "data" / "test"

    @property
    def clean_dir(self) -> Path:
        return self._owner("clean") / "models" / "clean"

    @property
    def morphnet_dir(self) -> Path:
        return self._owner("morphnet") / "models" / "morphnet"

    @property
    def poisoned_dir(self) -> Path:
        return self.root / "data" / "poisoned"

    def victim_dir(self, arch: str) -> Path:
        return self.root / "models" / f"victim_{arch}"

    def twin_dir(self, arch: str) -> Path:
        return self.root / "models" / f"twin_{arch}"

    @property
    def triggers_dir(self) -> Path:
        return self.root / "models" / "triggers"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def samples_dir(self) -> Path:
        return self.root / "samples"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    @property
    def manifests_dir(self) -> Path:
        return self.root / "manifests"

    def manifest_path(self, stage_name: str) -> Path:
        return self.manifests_dir / f"{stage_name}.json"

    def sweep_dir(self, axis: str, label: str) -> Path:
        return self.root / "sweeps" / axis / label


@dataclass
class StageResult:
    """Outcome of one stage invocation."""

    stage: str
    skipped: bool
    manifest: RunManifest
    summary: list[str] = field(default_factory=list)


# =============================================================================
# Pipeline
# =============================================================================


class Pipeline:
    """Runs the stages of one experiment inside one run directory."""

    def __init__(
        self,
        config: ExperimentConfig,
        run_dir: Optional[Path] = None,
        use_cache: bool = True,
        layout: Optional[RunLayout] = None,
        cache_db: Optional[Path] = None,
    ):
        self.config = config
        self.layout = layout or RunLayout(Path(run_dir or config.output_dir))
        self.layout.root.mkdir(parents=True, exist_ok=True)
        self.tool_version = get_library_version()
        self.cache: Optional[StageCache] = (
            StageCache(self.layout.root, self.tool_version, cache_db) if use_cache else None
        )

    # ---------- stage machinery ----------

    def _config_snapshot(self) -> dict[str, Any]:
        return self.config.model_dump(mode="json", by_alias=True, exclude={"output_dir"})

    def _hash_inputs(self, stage_name: str, inputs: Mapping[str, Path]) -> dict[str, str]:
        hashes: dict[str, str] = {}
        for name, path in inputs.items():
            if name in PRODUCERS and not (path / "meta.json").exists():
                raise MissingArtifactError(
                    f"{stage_name} needs {name} at {path}; run `{PRODUCERS[name]}` first"
                )
            if not path.exists():
                raise MissingArtifactError(f"{stage_name} needs {path}")
            if path.is_dir():
                for rel, digest in hash_directory(path).items():
                    hashes[f"{name}/{rel}"] = digest
            else:
                hashes[name] = sha256_file(path)
        return hashes

    def _hash_outputs(self, outputs: Sequence[Path]) -> dict[str, str]:
        root = self.layout.root
        hashes: dict[str, str] = {}
        for path in outputs:
            if path.is_dir():
                prefix = path.relative_to(root).as_posix()
                for rel, digest in hash_directory(path).items():
                    hashes[f"{prefix}/{rel}"] = digest
            elif path.exists():
                hashes[path.relative_to(root).as_posix()] = sha256_file(path)
        return hashes

    def _run_stage(
        self,
        stage_name: str,
        settings: Mapping[str, Any],
        inputs: Mapping[str, Path],
        outputs: Sequence[Path],
        body: Callable[[StageTimer], list[str]],
    ) -> StageResult:
        with stage(stage_name):
            input_hashes = self._hash_inputs(stage_name, inputs)
            input_hash = hash_payload(
                {"stage": stage_name, "settings": settings, "inputs": input_hashes}
            )
            manifest_path = self.layout.manifest_path(stage_name)
            if (
                self.cache is not None
                and manifest_path.exists()
                and self.cache.is_up_to_date(stage_name, input_hash, self._hash_outputs(outputs))
            ):
                logger.warning("%s is up to date, skipping", stage_name)
                text = manifest_path.read_text(encoding="utf-8")
                manifest = RunManifest.model_validate_json(text)
                return StageResult(stage_name, True, manifest, [f"{stage_name}: up to date"])

            started_at = datetime.now().isoformat()
            timer = StageTimer(stage_name)
            summary = body(timer)
            output_hashes = self._hash_outputs(outputs)
            manifest = RunManifest(
                stage=stage_name,
                tool_version=self.tool_version,
                input_hash=input_hash,
                config=self._config_snapshot(),
                inputs=input_hashes,
                outputs=output_hashes,
                timings={**timer.timings, "total": timer.total()},
                started_at=started_at,
                completed_at=datetime.now().isoformat(),
            )
            write_json_atomic(manifest_path, manifest)
            if self.cache is not None:
                self.cache.record(stage_name, input_hash, output_hashes)
            return StageResult(stage_name, False, manifest, summary)

    def _dump(self, *sections: str) -> dict[str, Any]:
        full = self.config.model_dump(mode="json", by_alias=True)
        return {name: full[name] for name in sections}

    def _provenance(self, checkpoints: Mapping[str, str]) -> Provenance:
        return Provenance(
            seeds=self.config.seeds.model_dump(),
            configs=self._config_snapshot(),
            checkpoints=dict(checkpoints),
        )

    def _targets(self, num_classes: int) -> list[int]:
        return resolve_targets(self.config.poison.target_classes, num_classes)

    # ---------- stages ----------

    def gen_data(self, from_xyz: Optional[Path] = None) -> StageResult:
        cfg = self.config
        layout = self.layout
        inputs = {"xyz": from_xyz} if from_xyz is not None else {}

        def body(timer: StageTimer) -> list[str]:
            with timer.phase("generate"):
                if from_xyz is not None:
                    train = ingest_xyz_tree(
                        from_xyz / "train", cfg.dataset.num_points, cfg.seeds.data, "train"
                    )
                    test = ingest_xyz_tree(
                        from_xyz / "test",
                        cfg.dataset.num_points,
                        cfg.seeds.data,
                        "test",
                        class_names=train.class_names,
                    )
                else:
                    train, test = generate_synthetic_splits(cfg.dataset, cfg.seeds.data)
            with timer.phase("write"):
                save_dataset(train, layout.train_dir)
                save_dataset(test, layout.test_dir)
            return [
                f"Generated {len(train)} training and {len(test)} test clouds "
                f"({train.num_classes} classes, N={train.num_points})"
            ]

        return self._run_stage(
            "gen-data",
            {**self._dump("dataset"), "seed": cfg.seeds.data, "from_xyz": from_xyz is not None},
            inputs,
            [layout.train_dir, layout.test_dir],
            body,
        )

    def train_clean(self) -> StageResult:
        cfg = self.config.clean_model
        layout = self.layout

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            test = load_dataset(layout.test_dir)
            with timer.phase("train"):
                run = train_classifier(
                    train, cfg.train, cfg.arch, history_path=layout.logs_dir / "train-clean.csv"
                )
            save_checkpoint(run.model, layout.clean_dir, cfg.train.seed, len(run.history))
            with timer.phase("accuracy"):
                acc = accuracy(run.model, test)
            return [f"Clean {cfg.arch} test accuracy: {100.0 * acc:.2f}%"]

        return self._run_stage(
            "train-clean",
            self._dump("clean_model"),
            {"train": layout.train_dir, "test": layout.test_dir},
            [layout.clean_dir],
            body,
        )

    def train_morphnet(self) -> StageResult:
        cfg = self.config
        layout = self.layout

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            clean = load_classifier(layout.clean_dir)
            with timer.phase("train"):
                run = train_morphnet(
                    clean,
                    train,
                    cfg.morph_train,
                    cfg.morphnet,
                    history_path=layout.logs_dir / "train-morphnet.csv",
                )
            save_checkpoint(run.model, layout.morphnet_dir, cfg.morph_train.seed, len(run.history))
            lines = [f"Trained {cfg.morphnet.n_blocks}-block {cfg.morphnet.variant} generator"]
            if run.history:
                last = run.history[-1]
                lines.append(
                    f"Final losses: cls {last.loss_cls:.4f}, rec {last.loss_rec:.4f}, "
                    f"den {last.loss_den:.4f}"
                )
            return lines

        return self._run_stage(
            "train-morphnet",
            self._dump("morphnet", "morph_train"),
            {"train": layout.train_dir, "clean": layout.clean_dir},
            [layout.morphnet_dir],
            body,
        )

    def poison(self) -> StageResult:
        cfg = self.config
        layout = self.layout

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            morphnet = load_morphnet(layout.morphnet_dir)
            with timer.phase("generate"):
                poisoned = poison_training_set(morphnet, train, cfg.poison)
            save_dataset(poisoned, layout.poisoned_dir)
            return [
                f"Poisoned {int(poisoned.poisoned.sum())} of {len(poisoned)} training records "
                f"(alpha={cfg.poison.alpha:g}%)"
            ]

        return self._run_stage(
            "poison",
            self._dump("poison"),
            {"train": layout.train_dir, "morphnet": layout.morphnet_dir},
            [layout.poisoned_dir],
            body,
        )

    def train_victim(self, arch: Optional[ClassifierArch] = None) -> StageResult:
        cfg = self.config.victim
        arch = arch or cfg.arch
        layout = self.layout

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            poisoned = load_dataset(layout.poisoned_dir)
            with timer.phase("train"):
                pair = train_victim_pair(poisoned, train, cfg.train, arch, layout.logs_dir)
            for run, directory in (
                (pair.victim, layout.victim_dir(arch)),
                (pair.twin, layout.twin_dir(arch)),
            ):
                save_checkpoint(run.model, directory, cfg.train.seed, len(run.history))
            return [f"Trained {arch} victim and benign twin"]

        return self._run_stage(
            f"train-victim-{arch}",
            {**self._dump("victim"), "arch": arch},
            {"train": layout.train_dir, "poisoned": layout.poisoned_dir},
            [layout.victim_dir(arch), layout.twin_dir(arch)],
            body,
        )

    def evaluate(self, arch: Optional[ClassifierArch] = None, samples: int = 0) -> StageResult:
        cfg = self.config
        arch = arch or cfg.victim.arch
        layout = self.layout
        stem = f"morphnet_{arch}"
        outputs = [
            layout.reports_dir / f"{stem}.json",
            layout.reports_dir / f"{stem}_per_class.csv",
        ]
        if samples > 0:
            outputs.append(layout.samples_dir)

        def body(timer: StageTimer) -> list[str]:
            test = load_dataset(layout.test_dir)
            morphnet = load_morphnet(layout.morphnet_dir)
            victim = load_classifier(layout.victim_dir(arch))
            twin = load_classifier(layout.twin_dir(arch))
            with timer.phase("evaluate"):
                report = evaluate_against_twin(
                    victim,
                    twin,
                    morphnet,
                    test,
                    cfg.evaluation,
                    cfg.poison.target_classes,
                    victim_arch=arch,
                    source_arch=cfg.clean_model.arch,
                    provenance=self._provenance(
                        {
                            "morphnet": model_digest(morphnet),
                            "victim": model_digest(victim),
                            "twin": model_digest(twin),
                        }
                    ),
                )
            write_report(report, layout.reports_dir, stem)
            if samples > 0:
                with timer.phase("export"):
                    export_samples(
                        morphnet, test, samples, layout.samples_dir, cfg.poison.target_classes
                    )
            return _report_lines(report)

        return self._run_stage(
            f"evaluate-{arch}",
            {
                **self._dump("evaluation"),
                "targets": cfg.poison.target_classes,
                "samples": samples,
                "arch": arch,
            },
            {
                "test": layout.test_dir,
                "morphnet": layout.morphnet_dir,
                "victim": layout.victim_dir(arch),
                "twin": layout.twin_dir(arch),
            },
            outputs,
            body,
        )

    def transfer(self, arch: Optional[ClassifierArch] = None) -> StageResult:
        """Train a victim of another architecture on the poisoned set and evaluate it."""
        cfg = self.config
        arch = arch or cfg.transfer.arch
        layout = self.layout
        stem = f"transfer_{arch}"

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            test = load_dataset(layout.test_dir)
            poisoned = load_dataset(layout.poisoned_dir)
            morphnet = load_morphnet(layout.morphnet_dir)
            with timer.phase("transfer"):
                report = transfer_eval(
                    morphnet,
                    poisoned,
                    arch,
                    test,
                    train,
                    cfg.victim.train,
                    cfg.evaluation,
                    cfg.poison.target_classes,
                    source_arch=cfg.clean_model.arch,
                    history_dir=layout.logs_dir / "transfer",
                )
            report = report.model_copy(
                update={"provenance": self._provenance(report.provenance.checkpoints)}
            )
            write_report(report, layout.reports_dir, stem)
            return _report_lines(report)

        return self._run_stage(
            f"transfer-{arch}",
            {
                **self._dump("transfer", "victim", "evaluation"),
                "targets": cfg.poison.target_classes,
            },
            {
                "train": layout.train_dir,
                "test": layout.test_dir,
                "poisoned": layout.poisoned_dir,
                "morphnet": layout.morphnet_dir,
            },
            [
                layout.reports_dir / f"{stem}.json",
                layout.reports_dir / f"{stem}_per_class.csv",
            ],
            body,
        )

    def baseline(self, kind: BaselineKind) -> StageResult:
        if kind not in BASELINE_KINDS:
            raise InvalidInputError(f"unknown baseline kind '{kind}'")
        cfg = self.config
        layout = self.layout
        arch = cfg.victim.arch
        stem = f"baseline_{kind}"
        outputs = [
            layout.reports_dir / f"{stem}.json",
            layout.reports_dir / f"{stem}_per_class.csv",
            layout.reports_dir / f"{stem}_spectral.json",
            layout.reports_dir / f"{stem}_spectral.csv",
        ]
        if kind != "static":
            outputs.append(layout.triggers_dir)

        def body(timer: StageTimer) -> list[str]:
            train = load_dataset(layout.train_dir)
            test = load_dataset(layout.test_dir)
            clean = load_classifier(layout.clean_dir)
            twin = load_classifier(layout.twin_dir(arch))
            with timer.phase("attack"):
                outcome = run_baseline_attack(kind, cfg, train, test, clean, accuracy(twin, test))
            write_report(outcome.report, layout.reports_dir, stem)
            write_json_atomic(layout.reports_dir / f"{stem}_spectral.json", outcome.spectral)
            write_csv(
                layout.reports_dir / f"{stem}_spectral.csv",
                SPECTRAL_COLUMNS,
                [r.model_dump() for r in outcome.spectral.per_class],
            )
            for trigger in outcome.triggers:
                write_json_atomic(layout.triggers_dir / f"{kind}_{trigger.target}.json", trigger)
            return _report_lines(outcome.report) + [
                f"Spectral scan candidates poisoned: {outcome.spectral.mean_proportion:.2f}%"
            ]

        return self._run_stage(
            f"baseline-{kind}",
            {
                **self._dump("baselines", "poison", "victim", "evaluation"),
                "seed": cfg.seeds.baseline,
            },
            {
                "train": layout.train_dir,
                "test": layout.test_dir,
                "clean": layout.clean_dir,
                "twin": layout.twin_dir(arch),
            },
            outputs,
            body,
        )

    def defend(self, method: DefenseMethod) -> StageResult:
        if method == "spectral":
            return self._defend_spectral()
        if method == "cleanse":
            return self._defend_cleanse()
        if method == "augment":
            return self._defend_augment()
        raise InvalidInputError(f"unknown defense '{method}' (known: {', '.join(DEFENSE_METHODS)})")

    def _defend_spectral(self) -> StageResult:
        cfg = self.config
        layout = self.layout
        arch = cfg.victim.arch
        json_path = layout.reports_dir / "defense_spectral.json"
        csv_path = layout.reports_dir / "defense_spectral.csv"

        def body(timer: StageTimer) -> list[str]:
            poisoned = load_dataset(layout.poisoned_dir)
            victim = load_classifier(layout.victim_dir(arch))
            classes = cfg.defenses.spectral_classes
            if classes is None:
                classes = self._targets(poisoned.num_classes)
            with timer.phase("scan"):
                result = spectral_scan_all(victim, poisoned, classes)
            write_json_atomic(json_path, result)
            write_csv(csv_path, SPECTRAL_COLUMNS, [r.model_dump() for r in result.per_class])
            return [
                f"Spectral scan candidates poisoned: mean {result.mean_proportion:.2f}% "
                f"(min {result.min_proportion:.2f}, max {result.max_proportion:.2f})"
            ]

        return self._run_stage(
            "defend-spectral",
            {**self._dump("defenses", "poison"), "arch": arch},
            {"poisoned": layout.poisoned_dir, "victim": layout.victim_dir(arch)},
            [json_path, csv_path],
            body,
        )

    def _defend_cleanse(self) -> StageResult:
        cfg = self.config
        layout = self.layout
        arch = cfg.victim.arch
        json_path = layout.reports_dir / "defense_cleanse.json"
        csv_path = layout.reports_dir / "defense_cleanse_norms.csv"

        def body(timer: StageTimer) -> list[str]:
            test = load_dataset(layout.test_dir)
            victim = load_classifier(layout.victim_dir(arch))
            twin = load_classifier(layout.twin_dir(arch))
            with timer.phase("victim"):
                victim_result = neural_cleanse(victim, test, cfg.defenses.cleanse)
            with timer.phase("twin"):
                twin_result = neural_cleanse(twin, test, cfg.defenses.cleanse)
            report = CleanseReport(victim=victim_result, reference=twin_result)
            write_json_atomic(json_path, report)
            rows: list[dict[str, object]] = []
            for name, result in (("victim", victim_result), ("reference", twin_result)):
                for t, norm in enumerate(result.norms):
                    rows.append(
                        {
                            "model": name,
                            "target": t,
                            "norm": norm,
                            "anomaly_index": result.per_class_anomaly[t],
                            "flagged": t in result.flagged_classes,
                        }
                    )
            write_csv(csv_path, CLEANSE_COLUMNS, rows)
            return [
                f"Anomaly index: victim {victim_result.anomaly_index:.3f} "
                f"({'infected' if victim_result.infected else 'clean'}), "
                f"twin {twin_result.anomaly_index:.3f}"
            ]

        return self._run_stage(
            "defend-cleanse",
            {**self._dump("defenses"), "arch": arch},
            {
                "test": layout.test_dir,
                "victim": layout.victim_dir(arch),
                "twin": layout.twin_dir(arch),
            },
            [json_path, csv_path],
            body,
        )

    def _defend_augment(self) -> StageResult:
        cfg = self.config
        layout = self.layout
        arch = cfg.victim.arch
        modes = list(cfg.defenses.augment_modes)
        outputs: list[Path] = []
        for mode in modes:
            outputs.append(layout.reports_dir / f"defense_augment_{mode}.json")
            outputs.append(layout.reports_dir / f"defense_augment_{mode}_per_class.csv")

        def body(timer: StageTimer) -> list[str]:
            poisoned = load_dataset(layout.poisoned_dir)
            test = load_dataset(layout.test_dir)
            morphnet = load_morphnet(layout.morphnet_dir)
            twin = load_classifier(layout.twin_dir(arch))
            reference = accuracy(twin, test)
            lines: list[str] = []
            for mode in modes:
                with timer.phase(f"train-{mode}"):
                    victim = defended_training(
                        poisoned, AugmentSwitches.from_mode(mode), cfg.victim.train, arch
                    ).model
                with timer.phase(f"evaluate-{mode}"):
                    report = evaluate_attack(
                        victim,
                        morphnet,
                        test,
                        reference,
                        cfg.evaluation,
                        cfg.poison.target_classes,
                        victim_arch=arch,
                        source_arch=cfg.clean_model.arch,
                        provenance=self._provenance(
                            {"morphnet": model_digest(morphnet), "victim": model_digest(victim)}
                        ),
                    )
                write_report(report, layout.reports_dir, f"defense_augment_{mode}")
                lines.append(
                    f"Augmentation {mode}: mASR {report.masr:.2f}%, "
                    f"clean accuracy {report.victim_clean_accuracy:.2f}%"
                )
            return lines

        return self._run_stage(
            "defend-augment",
            {**self._dump("defenses", "victim", "evaluation", "poison"), "arch": arch},
            {
                "poisoned": layout.poisoned_dir,
                "test": layout.test_dir,
                "morphnet": layout.morphnet_dir,
                "twin": layout.twin_dir(arch),
            },
            outputs,
            body,
        )

    def run_attack(self) -> list[StageResult]:
        """Every stage from data generation to evaluation, skipping shared ones."""
        results: list[StageResult] = []
        if not self.layout.is_shared("data"):
            results.append(self.gen_data())
        if not self.layout.is_shared("clean"):
            results.append(self.train_clean())
        if not self.layout.is_shared("morphnet"):
            results.append(self.train_morphnet())
        results.append(self.poison())
        results.append(self.train_victim())
        results.append(self.evaluate())
        return results

    def clear_cache(self, stage_name: Optional[str] = None) -> int:
        if self.cache is None:
            return 0
        if stage_name is not None:
            return self.cache.forget(stage_name)
        return self.cache.clear()

    def cache_stats(self) -> dict[str, Any]:
        if self.cache is None:
            raise InvalidInputError("stage cache is disabled for this pipeline")
        return self.cache.get_stats()


def _report_lines(report: AttackReport) -> list[str]:
    return [
        f"mASR {report.masr:.2f}%, mASR-D {report.masr_defended:.2f}%",
        f"Clean accuracy {report.victim_clean_accuracy:.2f}% "
        f"(twin {report.reference_clean_accuracy:.2f}%, delta {report.accuracy_delta:+.2f})",
    ]


# =============================================================================
# Sweeps
# =============================================================================


def sweep_points(
    config: ExperimentConfig, axis: SweepAxis
) -> list[tuple[SweepPoint, dict[str, Any]]]:
    """Sweep points of one axis with the config overrides each one applies."""
    sweep = config.sweep
    base_depth = config.morphnet.n_blocks
    points: list[tuple[SweepPoint, dict[str, Any]]] = []
    if axis == "depth":
        for n in sweep.stack_depths:
            points.append(
                (
                    SweepPoint(axis=axis, label=f"depth_{n}", value=n, n_blocks=n),
                    {"morphnet.n_blocks": n, "morphnet.variant": "morph"},
                )
            )
        if sweep.include_folding_ablation:
            points.append(
                (
                    SweepPoint(axis=axis, label="folding", value=1, n_blocks=1, variant="folding"),
                    {"morphnet.n_blocks": 1, "morphnet.variant": "folding"},
                )
            )
    elif axis == "lambda":
        for value in sweep.lambdas:
            points.append(
                (
                    SweepPoint(
                        axis=axis, label=f"lambda_{value:g}", value=value, n_blocks=base_depth
                    ),
                    {"morph_train.weights.lambda": value},
                )
            )
    elif axis == "alpha":
        for value in sweep.alphas:
            points.append(
                (
                    SweepPoint(
                        axis=axis, label=f"alpha_{value:g}", value=value, n_blocks=base_depth
                    ),
                    {"poison.alpha": value},
                )
            )
    elif axis == "theta":
        for value in sweep.thetas:
            points.append(
                (
                    SweepPoint(
                        axis=axis, label=f"theta_{value:g}", value=value, n_blocks=base_depth
                    ),
                    {"morph_train.weights.theta": value},
                )
            )
    else:
        raise InvalidInputError(f"unknown sweep axis '{axis}' (known: {', '.join(SWEEP_AXES)})")
    return points


@dataclass
class SweepOutcome:
    point: SweepPoint
    report: AttackReport
    skipped: bool


def _run_sweep_point(
    base_root: str,
    config_data: dict[str, Any],
    point_data: dict[str, Any],
    overrides: dict[str, Any],
    use_cache: bool,
) -> tuple[dict[str, Any], dict[str, Any], bool]:
    """Worker entry point; arguments and results are plain data so that they pickle."""
    point = SweepPoint.model_validate(point_data)
    config = with_overrides(validate_config(config_data), overrides)
    base = RunLayout(Path(base_root))
    layout = RunLayout(
        base.sweep_dir(point.axis, point.label),
        shared=base,
        shared_artifacts=SHARED_ARTIFACTS[point.axis],
    )
    pipeline = Pipeline(config, layout=layout, use_cache=use_cache)
    write_json_atomic(layout.root / "point.json", point)
    results = pipeline.run_attack()
    report_path = layout.reports_dir / f"morphnet_{config.victim.arch}.json"
    report = AttackReport.model_validate_json(report_path.read_text(encoding="utf-8"))
    return (
        point.model_dump(mode="json"),
        report.model_dump(mode="json"),
        all(r.skipped for r in results),
    )


def _run_sweep_task(
    task: tuple[str, dict[str, Any], dict[str, Any], dict[str, Any], bool],
) -> tuple[dict[str, Any], dict[str, Any], bool]:
    return _run_sweep_point(*task)


def run_sweep(
    config: ExperimentConfig,
    axes: Sequence[SweepAxis] = SWEEP_AXES,
    jobs: int = 1,
    run_dir: Optional[Path] = None,
    use_cache: bool = True,
) -> list[SweepOutcome]:
    """Build the shared base artifacts, then run every sweep point.

    Points are independent and write to distinct directories; with
    ``jobs > 1`` they run in a process pool.
    """
    if jobs < 1:
        raise InvalidInputError(f"jobs must be at least 1, got {jobs}")
    base = Pipeline(config, run_dir, use_cache)
    base.gen_data()
    base.train_clean()
    if "alpha" in axes:
        base.train_morphnet()

    config_data = config.model_dump(mode="json", by_alias=True)
    tasks = [
        (str(base.layout.root), config_data, point.model_dump(mode="json"), overrides, use_cache)
        for axis in axes
        for point, overrides in sweep_points(config, axis)
    ]
    logger.info("Running %d sweep points with %d job(s)", len(tasks), jobs)

    raw: list[tuple[dict[str, Any], dict[str, Any], bool]]
    if jobs == 1:
        raw = [_run_sweep_point(*task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_run_sweep_task, tasks))

    return [
        SweepOutcome(SweepPoint.model_validate(p), AttackReport.model_validate(r), skipped)
        for p, r, skipped in raw
    ]


__all__ = [
    "DEFENSE_METHODS",
    "SWEEP_AXES",
    "Pipeline",
    "RunLayout",
    "StageResult",
    "SweepOutcome",
    "run_sweep",
    "sweep_points",
]
