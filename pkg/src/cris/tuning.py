"""Learning-rate search with median pruning, driven by an optuna study.

Each trial trains a fresh model with a log-uniform learning rate and
reports validation DICE (threshold 0.5) after every epoch. A trial is
pruned when that value falls strictly below the median of completed
trials at the same epoch, once the warmup epochs have passed and enough
completed trials exist. The final epoch is never pruned.

Trials run sequentially by default, which makes a study with a fixed seed
replay exactly. ``n_jobs > 1`` runs trials on optuna's thread pool; the
trial order, and with it the pruning decisions, is then not reproducible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import optuna
import torch.nn as nn
import yaml
from optuna.trial import FrozenTrial, TrialState

from .errors import ConfigError, EmptySplitError, VersionMismatchError
from .persistence import FORMAT_VERSION
from .tensors import Dataset
from .training import EpochRecord, TrainConfig, train

logger = logging.getLogger(__name__)

_SAMPLERS = ("random", "tpe")


@dataclass(frozen=True)
class SearchSpace:
    lr_low: float = 1e-6
    lr_high: float = 1e-2
    trials: int = 20
    warmup: int = 5
    min_trials: int = 3
    sampler: str = "random"

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_low", float(self.lr_low))
        object.__setattr__(self, "lr_high", float(self.lr_high))
        if not 0 < self.lr_low < self.lr_high:
            raise ConfigError(
                f"Learning-rate bounds must satisfy 0 < low < high, got {self.lr_low}, {self.lr_high}"
            )
        if self.trials < 1:
            raise ConfigError(f"trials must be positive, got {self.trials}")
        if self.warmup < 0 or self.min_trials < 1:
            raise ConfigError(
                f"warmup must be >= 0 and min_trials >= 1, got {self.warmup}, {self.min_trials}"
            )
        if self.sampler not in _SAMPLERS:
            raise ConfigError(f"sampler must be one of {_SAMPLERS}, got {self.sampler!r}")


class TrialStatus(str, Enum):
    COMPLETE = "complete"
    PRUNED = "pruned"
    FAILED = "failed"


@dataclass
class TrialRecord:
    trial_id: int
    config: Dict[str, Any]
    val_dice: List[float] = field(default_factory=list)
    status: TrialStatus = TrialStatus.COMPLETE
    final_score: float = float("nan")

    @property
    def learning_rate(self) -> float:
        return float(self.config["learning_rate"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trial_id": self.trial_id,
            "status": self.status.value,
            "final_score": self.final_score,
            "learning_rate": self.learning_rate,
            "val_dice": list(self.val_dice),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> TrialRecord:
        return cls(
            trial_id=int(d["trial_id"]),
            config=dict(d["config"]),
            val_dice=[float(v) for v in d["val_dice"]],
            status=TrialStatus(d["status"]),
            final_score=float(d["final_score"]),
        )


def sample_config(
    space: SearchSpace,
    rng: Union[np.random.Generator, optuna.Trial],
    base: TrainConfig = TrainConfig(),
) -> TrainConfig:
    """``base`` with a log-uniform learning rate from ``space``.

    ``rng`` is a NumPy generator or an optuna trial (which records the draw).
    """
    if isinstance(rng, np.random.Generator):
        exponent = rng.uniform(math.log10(space.lr_low), math.log10(space.lr_high))
        lr = min(max(10.0 ** exponent, space.lr_low), space.lr_high)
    else:
        lr = rng.suggest_float("learning_rate", space.lr_low, space.lr_high, log=True)
    return base.with_updates(learning_rate=lr)


def should_prune(
    record: TrialRecord,
    completed_trials: Sequence[TrialRecord],
    epoch: int,
    warmup: int = 5,
    min_trials: int = 3,
) -> bool:
    """True iff the trial's DICE at ``epoch`` is strictly below the reference median."""
    if epoch < warmup or epoch >= len(record.val_dice):
        return False
    reference = [r.val_dice[epoch] for r in completed_trials if len(r.val_dice) > epoch]
    if len(reference) < min_trials:
        return False
    return record.val_dice[epoch] < float(np.median(reference))


def _record_from_trial(t: FrozenTrial) -> TrialRecord:
    values = [t.intermediate_values[s] for s in sorted(t.intermediate_values)]
    if t.state == TrialState.COMPLETE:
        status, score = TrialStatus.COMPLETE, float(t.value)
    elif t.state == TrialState.PRUNED:
        status, score = TrialStatus.PRUNED, values[-1] if values else float("nan")
    else:
        status, score = TrialStatus.FAILED, float("nan")
    return TrialRecord(
        trial_id=t.number,
        config=dict(t.user_attrs.get("config", {"learning_rate": t.params.get("learning_rate")})),
        val_dice=values,
        status=status,
        final_score=score,
    )


class MedianRulePruner(optuna.pruners.BasePruner):
    """optuna pruner that applies :func:`should_prune` against completed trials."""

    def __init__(self, warmup: int = 5, min_trials: int = 3) -> None:
        self.warmup = warmup
        self.min_trials = min_trials

    def prune(self, study: optuna.Study, trial: FrozenTrial) -> bool:
        step = trial.last_step
        if step is None:
            return False
        completed = study.get_trials(deepcopy=False, states=(TrialState.COMPLETE,))
        return should_prune(
            _record_from_trial(trial),
            [_record_from_trial(t) for t in completed],
            step,
            self.warmup,
            self.min_trials,
        )


def _make_sampler(space: SearchSpace, seed: int) -> optuna.samplers.BaseSampler:
    if space.sampler == "tpe":
        return optuna.samplers.TPESampler(seed=seed)
    return optuna.samplers.RandomSampler(seed=seed)


def _stamp(manifest_hash: str) -> Dict[str, Any]:
    return {"format_version": FORMAT_VERSION, "manifest_hash": manifest_hash or "-"}


def save_trial(
    record: TrialRecord, study_dir: Union[str, Path], manifest_hash: str = ""
) -> Path:
    path = Path(study_dir) / f"trial_{record.trial_id:03d}.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**_stamp(manifest_hash), **record.to_dict()}
    path.write_text(yaml.safe_dump(body, sort_keys=False))
    return path


def load_trials(study_dir: Union[str, Path]) -> List[TrialRecord]:
    records = []
    for path in sorted(Path(study_dir).glob("trial_*.yaml")):
        d = yaml.safe_load(path.read_text())
        if d.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path} has format version {d.get('format_version')!r}, expected {FORMAT_VERSION}"
            )
        records.append(TrialRecord.from_dict(d))
    return records


def select_best(records: Sequence[TrialRecord]) -> Tuple[TrialRecord, bool]:
    """Best completed trial (earliest on ties), else the best partial one.

    The flag is False when no trial completed.
    """
    completed = [r for r in records if r.status is TrialStatus.COMPLETE]
    if completed:
        return max(completed, key=lambda r: (r.final_score, -r.trial_id)), True
    partial = [r for r in records if not math.isnan(r.final_score)]
    if not partial:
        raise ConfigError("No trial produced a validation score")
    return max(partial, key=lambda r: (r.final_score, -r.trial_id)), False


def tune(
    space: SearchSpace,
    splits: Sequence[Dataset],
    base_cfg: TrainConfig,
    model_factory: Callable[[], nn.Module],
    *,
    seed: int = 0,
    study_dir: Optional[Union[str, Path]] = None,
    n_jobs: int = 1,
    manifest_hash: str = "",
) -> Tuple[TrainConfig, List[TrialRecord]]:
    """Run ``space.trials`` trials and return the winning config with all records.

    ``model_factory`` must build an identically initialized model per call.
    Trial records go to ``study_dir`` (one YAML file per trial plus
    ``study.yaml``) when given, each stamped with the format version and
    ``manifest_hash``.
    """
    if len(splits[1]) == 0:
        raise EmptySplitError("Tuning needs a nonempty validation split")
    trial_cfg = base_cfg.with_updates(checkpoint_dir=None, checkpoint_every=0, select_best=False)

    def objective(trial: optuna.Trial) -> float:
        cfg = sample_config(space, trial, trial_cfg)
        trial.set_user_attr("config", cfg.to_dict())
        logger.info("trial %d: learning_rate=%.3g", trial.number, cfg.learning_rate)
        last: List[float] = []

        def report(record: EpochRecord, _model: nn.Module) -> None:
            last[:] = [record.val_dice]
            trial.report(record.val_dice, record.epoch)
            if record.epoch < cfg.epochs - 1 and trial.should_prune():
                logger.info("trial %d pruned at epoch %d (val_dice=%.4f)",
                            trial.number, record.epoch, record.val_dice)
                raise optuna.TrialPruned()

        train(model_factory(), splits, cfg, on_epoch_end=report)
        logger.info("trial %d finished: val_dice=%.4f", trial.number, last[0])
        return last[0]

    def persist(_study: optuna.Study, frozen: FrozenTrial) -> None:
        if study_dir is not None:
            save_trial(_record_from_trial(frozen), study_dir, manifest_hash)

    study = optuna.create_study(
        direction="maximize",
        sampler=_make_sampler(space, seed),
        pruner=MedianRulePruner(space.warmup, space.min_trials),
    )
    study.optimize(objective, n_trials=space.trials, n_jobs=n_jobs, callbacks=[persist])

    records = sorted((_record_from_trial(t) for t in study.trials), key=lambda r: r.trial_id)
    best, complete = select_best(records)
    if not complete:
        logger.warning("All trials were pruned; using best partial trial %d", best.trial_id)
    if study_dir is not None:
        summary = {
            **_stamp(manifest_hash),
            "status": "complete" if complete else "partial",
            "best_trial": best.trial_id,
            "best_learning_rate": best.learning_rate,
            "best_score": best.final_score,
            "trials": [
                {"trial_id": r.trial_id, "status": r.status.value,
                 "learning_rate": r.learning_rate, "final_score": r.final_score}
                for r in records
            ],
        }
        (Path(study_dir) / "study.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    return base_cfg.with_updates(learning_rate=best.learning_rate), records
