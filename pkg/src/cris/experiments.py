"""Experiment grid: run every dataset x backbone x strategy cell from one YAML file.

Usage::

    from cris.experiments import load_experiment, run_grid

    spec = load_experiment("experiment.yaml")
    reports = run_grid(spec)

Spec file::

    datasets:
      - {name: kvasir, kind: kvasir, root: data/Kvasir-SEG}
      - {name: synth, kind: synth, n: 60}
    backbones: [unet, unetpp, segnet]
    strategies: [backbone_only, backbone_fcn_joint, cris]
    image_size: [128, 128]
    tuning: {trials: 20, warmup: 5, min_trials: 3}
    training: {epochs: 30, batch_size: 4}
    backbone: {base_channels: 16, depth: 3}
    refinement: {expand_channels: 32, kernel_sizes: [7, 5, 3]}
    output_dir: results
    master_seed: 0

Results layout::

    <output_dir>/experiment.yaml           resolved copy of the spec
    <output_dir>/grid.yaml                 per-cell status
    <output_dir>/<dataset>.manifest        split manifest shared by the dataset's cells
    <output_dir>/<dataset>__<backbone>__<strategy>/
        report.csv pr_curve.csv per_image_dice.csv history.csv
        model.ckpt manifest.sha256 trials/
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch.nn as nn
import yaml

from . import data, training, tuning
from .backbones import BackboneConfig, BackboneKind, build_backbone
from .errors import ConfigError, CrisError, ExperimentSpecError
from .metrics import DEFAULT_GRID, EvalReport
from .persistence import load_checkpoint, save_checkpoint, write_manifest, write_report
from .refinement import RefinementConfig, build_refinement, compose
from .report import emit_pr_plot, emit_prob_maps, load_reports
from .tensors import Dataset
from .training import Strategy, TrainConfig
from .tuning import SearchSpace

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "CRIS_OUTPUT_DIR"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class DatasetSource:
    """Where one dataset comes from: a folder tree or the synthetic generator."""
    name: str
    kind: str = "kvasir"
    root: Optional[Path] = None
    n: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("kvasir", "cvc", "synth"):
            raise ExperimentSpecError(f"Dataset {self.name!r}: unknown kind {self.kind!r}")
        if self.kind != "synth" and self.root is None:
            raise ExperimentSpecError(f"Dataset {self.name!r} needs a 'root' folder")
        if "__" in self.name or "/" in self.name:
            raise ExperimentSpecError(f"Dataset name {self.name!r} may not contain '__' or '/'")

    def load(self, size: Tuple[int, int]) -> Dataset:
        if self.root is None:
            return data.synth_shapes(self.n, size, seed=self.seed, name=self.name)
        layout = data.DatasetLayout.for_root(self.root, self.kind)
        return data.load_dataset(layout, size, name=self.name)

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.root is not None:
            d["root"] = str(self.root)
        else:
            d.update(n=self.n, seed=self.seed)
        return d


@dataclass(frozen=True)
class GridCell:
    dataset: str
    backbone: BackboneKind
    strategy: Strategy

    @property
    def name(self) -> str:
        return f"{self.dataset}__{self.backbone.value}__{self.strategy.value}"


@dataclass(frozen=True)
class ExperimentSpec:
    datasets: Tuple[DatasetSource, ...]
    backbones: Tuple[BackboneKind, ...]
    strategies: Tuple[Strategy, ...]
    tuning: SearchSpace = SearchSpace()
    training: TrainConfig = TrainConfig()
    backbone: Dict[str, Any] = field(default_factory=dict)
    refinement: RefinementConfig = RefinementConfig()
    image_size: Tuple[int, int] = data.DEFAULT_SIZE
    output_dir: Path = Path("results")
    master_seed: int = 0
    threshold_grid: Tuple[float, ...] = tuple(DEFAULT_GRID)
    n_jobs: int = 1

    def __post_init__(self) -> None:
        for label, items in (("datasets", [d.name for d in self.datasets]),
                             ("backbones", self.backbones), ("strategies", self.strategies)):
            if not items:
                raise ExperimentSpecError(f"'{label}' must not be empty")
            if len(set(items)) != len(items):
                raise ExperimentSpecError(f"'{label}' lists an entry twice: {list(items)}")
        if self.n_jobs < 1:
            raise ExperimentSpecError(f"n_jobs must be positive, got {self.n_jobs}")
        # validated once so a bad size fails before any training starts
        for kind in self.backbones:
            self.backbone_config(kind).check_input_size(*self.image_size)

    def cells(self) -> List[GridCell]:
        return [
            GridCell(d.name, b, s)
            for d in self.datasets for b in self.backbones for s in self.strategies
        ]

    def backbone_config(self, kind: BackboneKind) -> BackboneConfig:
        return BackboneConfig(kind=kind, **{"seed": self.master_seed, **self.backbone})

    def build_model(self, cell: GridCell) -> nn.Module:
        """Freshly initialized model for a cell; identical on every call."""
        b = build_backbone(self.backbone_config(cell.backbone), self.image_size)
        if not cell.strategy.uses_refinement:
            return b
        return compose(b, build_refinement(self.refinement))

    def split_spec(self) -> data.SplitSpec:
        return data.SplitSpec(seed=self.master_seed)

    def to_dict(self) -> Dict[str, Any]:
        training_cfg = self.training.to_dict()
        training_cfg.pop("strategy")
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "backbones": [b.value for b in self.backbones],
            "strategies": [s.value for s in self.strategies],
            "image_size": list(self.image_size),
            "tuning": {f.name: getattr(self.tuning, f.name) for f in fields(SearchSpace)},
            "training": training_cfg,
            "backbone": dict(self.backbone),
            "refinement": self.refinement.to_dict(),
            "output_dir": str(self.output_dir),
            "master_seed": self.master_seed,
            "threshold_grid": list(self.threshold_grid),
            "n_jobs": self.n_jobs,
        }

    def describe(self) -> str:
        """Human-readable resolved grid, as printed by ``run-grid --dry-run``."""
        lines = [
            f"output_dir: {self.output_dir}",
            f"master_seed: {self.master_seed}",
            f"image_size: {self.image_size[0]}x{self.image_size[1]}",
            f"tuning: {self.tuning.trials} trials, lr in [{self.tuning.lr_low:g}, {self.tuning.lr_high:g}]",
            f"training: {self.training.epochs} epochs, batch {self.training.batch_size}",
            f"cells ({len(self.cells())}):",
        ]
        lines += [f"  {c.name}" for c in self.cells()]
        return "\n".join(lines)


_TOP_LEVEL = {
    "datasets", "backbones", "strategies", "tuning", "training", "backbone",
    "refinement", "image_size", "output_dir", "master_seed", "threshold_grid", "n_jobs",
}


def _mapping(data_: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = data_.get(key) or {}
    if not isinstance(value, dict):
        raise ExperimentSpecError(f"'{key}' must be a mapping, got {type(value).__name__}")
    return value


def _dataset_source(entry: Any, base_dir: Path) -> DatasetSource:
    if isinstance(entry, str):
        entry = {"name": entry, "kind": "synth"} if entry == "synth" else {"name": entry}
    if not isinstance(entry, dict) or "name" not in entry:
        raise ExperimentSpecError(f"Dataset entry must be a name or a mapping with 'name': {entry!r}")
    entry = dict(entry)
    entry.setdefault("kind", entry["name"] if entry["name"] in ("kvasir", "cvc", "synth") else "kvasir")
    if entry.get("root") is not None:
        entry["root"] = (base_dir / entry["root"]).resolve()
    try:
        return DatasetSource(**entry)
    except TypeError as exc:
        raise ExperimentSpecError(f"Bad dataset entry {entry!r}: {exc}") from exc


def parse_experiment(
    data_: Mapping[str, Any],
    base_dir: PathLike = ".",
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentSpec:
    """Build an ExperimentSpec from an already-parsed YAML mapping."""
    if not isinstance(data_, dict):
        raise ExperimentSpecError("Experiment file must be a YAML mapping")
    unknown = set(data_) - _TOP_LEVEL
    if unknown:
        raise ExperimentSpecError(f"Unknown experiment keys: {sorted(unknown)}")
    base_dir = Path(base_dir)
    environ = os.environ if environ is None else environ

    try:
        master_seed = int(data_.get("master_seed", 0))
        training_cfg = _mapping(data_, "training")
        spec = ExperimentSpec(
            datasets=tuple(_dataset_source(d, base_dir) for d in data_.get("datasets") or []),
            backbones=tuple(BackboneKind(b) for b in data_.get("backbones") or []),
            strategies=tuple(Strategy(s) for s in data_.get("strategies") or []),
            tuning=SearchSpace(**_mapping(data_, "tuning")),
            training=TrainConfig.from_dict({**training_cfg, "seed": master_seed}),
            backbone=_mapping(data_, "backbone"),
            refinement=RefinementConfig(**_mapping(data_, "refinement")),
            image_size=tuple(int(v) for v in data_.get("image_size", data.DEFAULT_SIZE)),
            output_dir=Path(environ.get(OUTPUT_DIR_ENV) or base_dir / data_.get("output_dir", "results")),
            master_seed=master_seed,
            threshold_grid=tuple(float(t) for t in data_.get("threshold_grid", DEFAULT_GRID)),
            n_jobs=int(data_.get("n_jobs", 1)),
        )
    except ExperimentSpecError:
        raise
    except (ConfigError, ValueError, TypeError) as exc:
        raise ExperimentSpecError(f"Invalid experiment: {exc}") from exc
    return spec


def _read_yaml(path: Path) -> Any:
    try:
        with open(path) as f:
            return yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ExperimentSpecError(f"{path} is not valid YAML: {exc}") from exc


def load_experiment(path: PathLike, environ: Optional[Mapping[str, str]] = None) -> ExperimentSpec:
    """Load and validate a YAML experiment file.

    Relative paths resolve against the file's directory; ``CRIS_OUTPUT_DIR``
    overrides ``output_dir``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Experiment file not found: {path}")
    return parse_experiment(_read_yaml(path), path.parent, environ)


def _run_cell(
    spec: ExperimentSpec, cell: GridCell, splits: data.DatasetSplits, manifest_hash: str
) -> EvalReport:
    cell_dir = spec.output_dir / cell.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    fit_splits = (splits.train, splits.val)

    base_cfg = spec.training.with_updates(strategy=cell.strategy)
    best_cfg, _ = tuning.tune(
        spec.tuning, fit_splits, base_cfg, lambda: spec.build_model(cell),
        seed=spec.master_seed, study_dir=cell_dir / "trials", n_jobs=spec.n_jobs,
        manifest_hash=manifest_hash,
    )
    logger.info("%s: retraining with learning_rate=%.3g", cell.name, best_cfg.learning_rate)
    best_cfg = best_cfg.with_updates(checkpoint_dir=str(cell_dir / "checkpoints"))
    model, history = training.train(
        spec.build_model(cell), fit_splits, best_cfg, manifest_hash=manifest_hash
    )
    history.to_csv(cell_dir / "history.csv", manifest_hash)
    save_checkpoint(
        model, None, len(history) - 1, cell_dir / "model.ckpt",
        history=history.to_dicts(), train_config=best_cfg.to_dict(), manifest_hash=manifest_hash,
    )

    report = training.evaluate_model(
        model, splits.train, splits.test, spec.threshold_grid,
        model=cell.backbone.value, dataset=cell.dataset, strategy=cell.strategy.value,
        manifest_hash=manifest_hash,
    )
    write_report(report, cell_dir)
    (cell_dir / "manifest.sha256").write_text(manifest_hash + "\n")
    logger.info("%s: test dice=%.4f mse=%.4f (threshold %.2f)",
                cell.name, report.dice, report.mse, report.best_threshold)
    return report


def prepare_splits(spec: ExperimentSpec, source: DatasetSource) -> Tuple[data.DatasetSplits, str]:
    """Load and split one dataset, writing or checking its manifest."""
    dataset = source.load(spec.image_size)
    splits = data.split_dataset(dataset, spec.split_spec())
    digest = write_manifest(spec.output_dir / f"{source.name}.manifest", splits.assignments())
    return splits, digest


def run_grid(spec: ExperimentSpec, *, dry_run: bool = False) -> Dict[str, Optional[EvalReport]]:
    """Run every cell; returns cell name -> report (None for failed cells).

    A failing cell is logged, recorded as failed in ``grid.yaml`` and
    skipped. With ``dry_run`` nothing is loaded or trained.
    """
    cells = spec.cells()
    if dry_run:
        return {c.name: None for c in cells}

    spec.output_dir.mkdir(parents=True, exist_ok=True)
    (spec.output_dir / "experiment.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))

    results: Dict[str, Optional[EvalReport]] = {}
    status: Dict[str, Dict[str, Any]] = {}
    manifests: Dict[str, str] = {}
    for source in spec.datasets:
        ds_cells = [c for c in cells if c.dataset == source.name]
        try:
            splits, digest = prepare_splits(spec, source)
        except (CrisError, OSError) as exc:
            logger.error("Dataset %s failed to load: %s", source.name, exc)
            for c in ds_cells:
                results[c.name] = None
                status[c.name] = {"status": "failed", "message": f"{type(exc).__name__}: {exc}"}
            continue
        manifests[source.name] = digest

        for cell in ds_cells:
            try:
                results[cell.name] = _run_cell(spec, cell, splits, digest)
                status[cell.name] = {"status": "ok"}
            except Exception as exc:
                logger.exception("Cell %s failed", cell.name)
                results[cell.name] = None
                status[cell.name] = {"status": "failed", "message": f"{type(exc).__name__}: {exc}"}

    summary = {
        "manifests": manifests,
        "cells": [{"cell": c.name, **status[c.name]} for c in cells],
    }
    (spec.output_dir / "grid.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    failed = sum(1 for s in status.values() if s["status"] == "failed")
    logger.info("Grid finished: %d ok, %d failed", len(cells) - failed, failed)
    return results


def emit_plots(results_dir: PathLike, *, samples: int = 1) -> List[Path]:
    """PR curves and probability-map grids per dataset from a finished grid."""
    results_dir = Path(results_dir)
    exp_path = results_dir / "experiment.yaml"
    if not exp_path.exists():
        raise FileNotFoundError(f"No experiment.yaml in {results_dir}; run the grid first")
    spec = parse_experiment(_read_yaml(exp_path), results_dir, environ={})
    spec = replace(spec, output_dir=results_dir)

    written: List[Path] = []
    reports = load_reports(results_dir)
    for source in spec.datasets:
        curves: Dict[str, Dict[str, Any]] = {}
        for r in reports:
            if r.dataset == source.name:
                curves.setdefault(r.model, {})[r.strategy] = r.pr_curve
        if not curves:
            continue
        written.append(emit_pr_plot(curves, results_dir / f"pr_{source.name}.png", title=source.name))

        models: Dict[str, Dict[str, nn.Module]] = {}
        for cell in spec.cells():
            ckpt_path = results_dir / cell.name / "model.ckpt"
            if cell.dataset == source.name and ckpt_path.exists():
                models.setdefault(cell.backbone.value, {})[cell.strategy.value] = \
                    load_checkpoint(ckpt_path).model
        if models:
            splits, _ = prepare_splits(spec, source)
            picked = list(splits.test)[:samples]
            written.append(emit_prob_maps(models, picked, results_dir / f"prob_maps_{source.name}.png"))
    return written
