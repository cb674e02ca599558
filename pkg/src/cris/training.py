"""Training strategies: baseline backbone, joint backbone+FCN, and the
epoch-interleaved MSE/BCE schedule.

The optimizer is Adam with ``zero_grad(set_to_none=True)``: parameters that
receive no gradient in a step keep ``grad is None``, so Adam neither moves
them nor advances their moment estimates. During L1 epochs the refinement
head is never run, which leaves its weights and Adam state untouched.

Each epoch reseeds two generators from ``(seed, epoch)``: the batch order
(NumPy) and torch's global generator (dropout). A run resumed from an
epoch checkpoint therefore replays the same batches and dropout masks.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .backbones import Backbone
from .errors import ConfigError, EmptySplitError
from .losses import EpochLossWeights, combined_loss, epoch_weights, loss_bce, loss_mse
from .metrics import EvalReport, best_threshold, build_report, dataset_mse, per_image_dice
from .persistence import (
    load_checkpoint,
    model_config,
    read_csv,
    restore_into,
    save_checkpoint,
    write_csv,
)
from .refinement import FullModel
from .tensors import Dataset, Sample

logger = logging.getLogger(__name__)

VAL_THRESHOLD = 0.5

_BASELINE_LOSSES = {"bce": loss_bce, "mse": loss_mse}


class Strategy(str, Enum):
    BACKBONE_ONLY = "backbone_only"
    BACKBONE_FCN_JOINT = "backbone_fcn_joint"
    CRIS = "cris"

    @property
    def label(self) -> str:
        return _STRATEGY_LABELS[self]

    @property
    def uses_refinement(self) -> bool:
        return self is not Strategy.BACKBONE_ONLY


_STRATEGY_LABELS = {
    Strategy.BACKBONE_ONLY: "Backbone",
    Strategy.BACKBONE_FCN_JOINT: "Backbone+FCN",
    Strategy.CRIS: "Proposed",
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one training run.

    ``learning_rate`` may be 0 (parameters then never move). Checkpoints
    are written every ``checkpoint_every`` epochs, plus ``best.ckpt`` on
    each validation improvement, when ``checkpoint_dir`` is set.
    """
    batch_size: int = 4
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    strategy: Strategy = Strategy.CRIS
    seed: int = 0
    baseline_loss: str = "bce"
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    num_threads: Optional[int] = None
    select_best: bool = True

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        except ValueError:
            raise ConfigError(
                f"Unknown strategy {self.strategy!r}; expected one of {[s.value for s in Strategy]}"
            )
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        if self.checkpoint_dir is not None:
            object.__setattr__(self, "checkpoint_dir", str(self.checkpoint_dir))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ConfigError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        if self.baseline_loss not in _BASELINE_LOSSES:
            raise ConfigError(
                f"baseline_loss must be one of {sorted(_BASELINE_LOSSES)}, got {self.baseline_loss!r}"
            )
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.num_threads is not None and self.num_threads < 1:
            raise ConfigError(f"num_threads must be positive, got {self.num_threads}")

    def with_updates(self, **changes: Any) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"Unknown training settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    active_loss: str
    train_loss: float
    val_dice: float
    val_mse: float


HISTORY_COLUMNS = tuple(f.name for f in fields(EpochRecord))


class TrainHistory:
    """Per-epoch records in epoch order."""

    def __init__(self, records: Sequence[EpochRecord] = ()) -> None:
        self.records: List[EpochRecord] = list(records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EpochRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> EpochRecord:
        return self.records[i]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TrainHistory) and self.records == other.records

    def __repr__(self) -> str:
        return f"TrainHistory({len(self.records)} epochs)"

    def active_losses(self) -> List[str]:
        return [r.active_loss for r in self.records]

    def val_dice(self) -> List[float]:
        return [r.val_dice for r in self.records]

    def best(self) -> Optional[EpochRecord]:
        """Record with the highest validation DICE; earliest wins ties."""
        best: Optional[EpochRecord] = None
        for r in self.records:
            if not np.isnan(r.val_dice) and (best is None or r.val_dice > best.val_dice):
                best = r
        return best

    def to_dicts(self) -> List[Dict[str, Any]]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_dicts(cls, rows: Sequence[Dict[str, Any]]) -> TrainHistory:
        return cls([
            EpochRecord(
                epoch=int(r["epoch"]),
                active_loss=str(r["active_loss"]),
                train_loss=float(r["train_loss"]),
                val_dice=float(r["val_dice"]),
                val_mse=float(r["val_mse"]),
            )
            for r in rows
        ])

    def to_csv(self, path: Union[str, Path], manifest_hash: str = "") -> Path:
        rows = [[getattr(r, c) for c in HISTORY_COLUMNS] for r in self.records]
        return write_csv(path, HISTORY_COLUMNS, rows, manifest_hash)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> TrainHistory:
        rows, _ = read_csv(path)
        return cls.from_dicts(rows)


EpochCallback = Callable[[EpochRecord, nn.Module], None]
Batch = Union[Sequence[Sample], Tuple[torch.Tensor, torch.Tensor]]


def _as_batch(batch: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor):
        return batch
    samples = list(batch)
    if not samples:
        raise EmptySplitError("Cannot train on an empty batch")
    x = torch.from_numpy(np.stack([s.image.data for s in samples]))
    g = torch.from_numpy(np.stack([s.mask.data for s in samples]))
    return x, g


def train_step(
    model: nn.Module,
    batch: Batch,
    weights: Optional[EpochLossWeights],
    optimizer: torch.optim.Optimizer,
    *,
    baseline_loss: str = "bce",
) -> float:
    """One Adam step; returns the batch loss before the update.

    For a FullModel the active term of ``weights`` is optimized and the
    inactive output is never computed. A bare Backbone (``weights`` None)
    minimizes ``baseline_loss`` on its own output.
    """
    x, g = _as_batch(batch)
    optimizer.zero_grad(set_to_none=True)
    if isinstance(model, FullModel):
        if weights is None:
            raise ConfigError("A FullModel step needs epoch loss weights")
        if weights.w1:
            loss = combined_loss(weights, model.backbone(x), None, g)
        else:
            _, final = model(x)
            loss = combined_loss(weights, None, final, g)
    else:
        loss = _BASELINE_LOSSES[baseline_loss](model(x), g)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def strategy_weights(strategy: Strategy, epoch: int) -> Optional[EpochLossWeights]:
    if strategy is Strategy.CRIS:
        return epoch_weights(epoch)
    if strategy is Strategy.BACKBONE_FCN_JOINT:
        return EpochLossWeights(w1=0, w2=1)
    return None


def active_loss_id(weights: Optional[EpochLossWeights], baseline_loss: str = "bce") -> str:
    if weights is None:
        return baseline_loss.upper()
    return "L1" if weights.w1 else "L2"


def _check_strategy(model: nn.Module, strategy: Strategy) -> None:
    if strategy.uses_refinement and not isinstance(model, FullModel):
        raise ConfigError(f"Strategy {strategy.value!r} needs a backbone composed with a refinement head")
    if not strategy.uses_refinement and not isinstance(model, Backbone):
        raise ConfigError("Strategy 'backbone_only' takes a bare backbone")


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def predict(model: nn.Module, dataset: Dataset, batch_size: int = 16) -> np.ndarray:
    """Scored probability maps, shape (N, 1, H, W).

    A FullModel is scored on its refined output, a Backbone on its own.
    """
    if len(dataset) == 0:
        raise EmptySplitError(f"Nothing to predict in {dataset.name!r}")
    was_training = model.training
    model.eval()
    images = torch.from_numpy(dataset.images())
    outputs = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out = model(images[i:i + batch_size])
                if isinstance(out, tuple):
                    out = out[1]
                outputs.append(out.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(outputs).astype(np.float32)


def validate(model: nn.Module, dataset: Dataset) -> Tuple[float, float]:
    """(mean DICE at threshold 0.5, MSE) on a validation split; NaN when empty."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    probs = predict(model, dataset)
    masks = dataset.masks()
    return float(per_image_dice(probs, masks, VAL_THRESHOLD).mean()), dataset_mse(probs, masks)


def evaluate_model(
    model: nn.Module,
    train_set: Dataset,
    test_set: Dataset,
    grid: Optional[Sequence[float]] = None,
    /,
    **labels: str,
) -> EvalReport:
    """Pick the DICE-maximizing threshold on ``train_set``, then score ``test_set``."""
    t = best_threshold(predict(model, train_set), train_set.masks(), grid)
    logger.info("Selected threshold %.2f on %s", t, train_set.name)
    return build_report(predict(model, test_set), test_set.masks(), t, **labels)


def _save(model, optimizer, epoch, history, cfg, path, manifest_hash) -> None:
    save_checkpoint(
        model, optimizer.state_dict(), epoch, path,
        history=history.to_dicts(), train_config=cfg.to_dict(), manifest_hash=manifest_hash,
    )


def train(
    model: nn.Module,
    splits: Sequence[Dataset],
    cfg: TrainConfig,
    *,
    on_epoch_end: Optional[EpochCallback] = None,
    resume_from: Optional[Union[str, Path]] = None,
    manifest_hash: str = "",
) -> Tuple[nn.Module, TrainHistory]:
    """Train ``model`` in place on ``splits[0]``, validating on ``splits[1]``.

    ``splits`` is a DatasetSplits or any (train, val, ...) sequence; the
    test split, if present, is never touched. Exceptions raised by
    ``on_epoch_end`` (for example a pruning signal) propagate after the
    epoch's checkpoints are written.
    """
    _check_strategy(model, cfg.strategy)
    train_set, val_set = splits[0], splits[1]
    n = len(train_set)
    if n == 0:
        raise EmptySplitError(f"Training split {train_set.name!r} is empty")
    if cfg.num_threads is not None:
        torch.set_num_threads(cfg.num_threads)

    images = torch.from_numpy(train_set.images())
    masks = torch.from_numpy(train_set.masks())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    history = TrainHistory()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    best_dice: Optional[float] = None
    best_state: Optional[Dict[str, torch.Tensor]] = None
    first_epoch = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_config=model_config(model))
        restore_into(model, ckpt)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        history = TrainHistory.from_dicts(ckpt.history)
        first_epoch = ckpt.epoch + 1
        best = history.best()
        if best is not None:
            best_dice = best.val_dice
            best_path = Path(resume_from).parent / "best.ckpt"
            if best_path.exists():
                best_state = copy.deepcopy(load_checkpoint(best_path).model.state_dict())
        logger.info("Resuming from %s at epoch %d", resume_from, first_epoch)

    for epoch in range(first_epoch, cfg.epochs):
        weights = strategy_weights(cfg.strategy, epoch)
        torch.manual_seed(_epoch_seed(cfg.seed, epoch))
        order = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(n))

        model.train()
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(model, (images[idx], masks[idx]), weights, optimizer,
                              baseline_loss=cfg.baseline_loss)
            total += loss * len(idx)

        val_dice, val_mse = validate(model, val_set)
        record = EpochRecord(
            epoch=epoch,
            active_loss=active_loss_id(weights, cfg.baseline_loss),
            train_loss=total / n,
            val_dice=val_dice,
            val_mse=val_mse,
        )
        history.append(record)
        logger.info(
            "epoch %d/%d %s loss=%.5f val_dice=%.4f val_mse=%.5f",
            epoch + 1, cfg.epochs, record.active_loss, record.train_loss, val_dice, val_mse,
        )

        improved = not np.isnan(val_dice) and (best_dice is None or val_dice > best_dice)
        if improved:
            best_dice = val_dice
            best_state = copy.deepcopy(model.state_dict())
        if ckpt_dir is not None:
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _save(model, optimizer, epoch, history, cfg,
                      ckpt_dir / f"epoch_{epoch:03d}.ckpt", manifest_hash)
            if improved:
                _save(model, optimizer, epoch, history, cfg, ckpt_dir / "best.ckpt", manifest_hash)

        if on_epoch_end is not None:
            on_epoch_end(record, model)

    if cfg.select_best and best_state is not None:
        model.load_state_dict(best_state)
    return model, history
