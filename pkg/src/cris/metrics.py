"""Mask quality metrics: confusion counts, precision/recall, DICE, MSE, PR curves.

Conventions for empty denominators: precision is 1.0 when nothing is
predicted, recall is 1.0 when the ground truth is empty, and DICE is 1.0
when both masks are empty. PR curves pool counts over images (micro);
DICE and MSE are averaged per image (macro).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidThresholdError, ShapeMismatchError
from .tensors import ArrayLike, as_array

DEFAULT_GRID: List[float] = [i / 100 for i in range(101)]


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts of a thresholded prediction against ground truth."""
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class EvalReport:
    """Test-set scores of one model; ``dice`` is the mean of ``per_image_dice``."""
    dice: float
    mse: float
    best_threshold: float
    pr_curve: List[PRPoint]
    per_image_dice: List[float]
    model: str = ""
    dataset: str = ""
    strategy: str = ""
    manifest_hash: str = ""


def _pair(pred: ArrayLike, g: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_array(pred), as_array(g)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Prediction {a.shape} vs ground truth {b.shape}")
    return a, b


def confusion(pred: ArrayLike, g: ArrayLike) -> ConfusionCounts:
    a, b = _pair(pred, g)
    p = a.astype(bool)
    t = b.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=p.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return 1.0 if denom == 0 else c.tp / denom


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def dice(pred: ArrayLike, g: ArrayLike) -> float:
    return dice_from_counts(confusion(pred, g))


def mse_metric(p: ArrayLike, g: ArrayLike) -> float:
    a, b = _pair(p, g)
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


def _stack(maps: Sequence[ArrayLike], what: str) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        return maps
    if len(maps) == 0:
        raise ConfigError(f"No {what} given")
    return np.stack([as_array(m) for m in maps])


def _stack_aligned(probs, gts) -> tuple[np.ndarray, np.ndarray]:
    p = _stack(probs, "probability maps")
    g = _stack(gts, "ground-truth masks")
    if p.shape != g.shape:
        raise ShapeMismatchError(f"Probability stack {p.shape} vs mask stack {g.shape}")
    if p.shape[0] == 0:
        raise ConfigError("No images to evaluate")
    return p, g.astype(bool)


def _check_thresholds(thresholds: Sequence[float]) -> List[float]:
    ts = [float(t) for t in thresholds]
    if not ts:
        raise ConfigError("Threshold list is empty")
    for t in ts:
        if not 0.0 <= t <= 1.0:
            raise InvalidThresholdError(f"Threshold must be in [0, 1], got {t!r}")
    return ts


def dataset_mse(probs: Sequence[ArrayLike], gts: Sequence[ArrayLike]) -> float:
    """Per-image MSE averaged over images."""
    p, g = _stack_aligned(probs, gts)
    axes = tuple(range(1, p.ndim))
    per_image = np.mean((p.astype(np.float64) - g.astype(np.float64)) ** 2, axis=axes)
    return float(per_image.mean())


def per_image_dice(
    probs: Sequence[ArrayLike], gts: Sequence[ArrayLike], t: float
) -> np.ndarray:
    """DICE of ``binarize(p, t)`` against each ground truth, one value per image."""
    return _per_image_dice(*_stack_aligned(probs, gts), _check_thresholds([t])[0])


def _per_image_dice(p: np.ndarray, g: np.ndarray, t: float) -> np.ndarray:
    axes = tuple(range(1, p.ndim))
    pred = p >= t
    tp = np.count_nonzero(pred & g, axis=axes)
    fp = np.count_nonzero(pred & ~g, axis=axes)
    fn = np.count_nonzero(~pred & g, axis=axes)
    denom = 2 * tp + fp + fn
    out = np.ones(len(p), dtype=np.float64)
    nz = denom > 0
    out[nz] = 2 * tp[nz] / denom[nz]
    return out


def pr_curve(
    probs: Sequence[ArrayLike], gts: Sequence[ArrayLike], thresholds: Sequence[float]
) -> List[PRPoint]:
    """Micro-averaged precision and recall at each threshold (ascending)."""
    ts = _check_thresholds(thresholds)
    if any(a > b for a, b in zip(ts, ts[1:])):
        raise ConfigError("Thresholds must be sorted ascending")
    p, g = _stack_aligned(probs, gts)
    positives = int(np.count_nonzero(g))
    points: List[PRPoint] = []
    for t in ts:
        pred = p >= t
        tp = int(np.count_nonzero(pred & g))
        predicted = int(np.count_nonzero(pred))
        c = ConfusionCounts(tp=tp, fp=predicted - tp, fn=positives - tp,
                            tn=p.size - predicted - positives + tp)
        points.append(PRPoint(threshold=t, precision=precision(c), recall=recall(c)))
    return points


def best_threshold(
    probs: Sequence[ArrayLike],
    gts: Sequence[ArrayLike],
    grid: Optional[Sequence[float]] = None,
) -> float:
    """Grid value maximizing mean per-image DICE; ties go to the smallest value."""
    ts = sorted(_check_thresholds(DEFAULT_GRID if grid is None else grid))
    p, g = _stack_aligned(probs, gts)
    best_t = ts[0]
    best_score = -1.0
    for t in ts:
        score = float(_per_image_dice(p, g, t).mean())
        if score > best_score:
            best_t, best_score = t, score
    return best_t


def build_report(
    probs: Sequence[ArrayLike],
    gts: Sequence[ArrayLike],
    threshold: float,
    pr_thresholds: Optional[Sequence[float]] = None,
    **labels: str,
) -> EvalReport:
    """Score probability maps at a fixed threshold and sweep the PR curve."""
    p, g = _stack_aligned(probs, gts)
    scores = _per_image_dice(p, g, _check_thresholds([threshold])[0])
    return EvalReport(
        dice=float(scores.mean()),
        mse=dataset_mse(p, g),
        best_threshold=threshold,
        pr_curve=pr_curve(p, g, DEFAULT_GRID if pr_thresholds is None else pr_thresholds),
        per_image_dice=[float(s) for s in scores],
        **labels,
    )
