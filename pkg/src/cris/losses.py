"""Segmentation losses and the epoch-parity loss schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError, ShapeMismatchError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class EpochLossWeights:
    """Weights of the backbone MSE term (w1) and refined BCE term (w2)."""
    w1: int
    w2: int

    def __post_init__(self) -> None:
        if {self.w1, self.w2} != {0, 1}:
            raise ConfigError(f"Exactly one of w1, w2 must be 1, got ({self.w1}, {self.w2})")


def epoch_weights(e: int) -> EpochLossWeights:
    """Even epochs train L1 (backbone MSE), odd epochs train L2 (refined BCE)."""
    if e < 0:
        raise ConfigError(f"Epoch index must be >= 0, got {e}")
    parity = e % 2
    return EpochLossWeights(w1=1 - parity, w2=parity)


def _check_shapes(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise ShapeMismatchError(f"Prediction {tuple(p.shape)} vs target {tuple(g.shape)}")


def _image_mean(x: torch.Tensor) -> torch.Tensor:
    # (1, H, W) -> scalar; (N, 1, H, W) -> mean of per-image means
    if x.ndim == 4:
        return x.mean(dim=(1, 2, 3)).mean()
    return x.mean()


def loss_mse(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Per-pixel squared error, averaged per image, then over the batch."""
    _check_shapes(p, g)
    return _image_mean((p - g) ** 2)


def loss_bce(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy with p clamped to [eps, 1 - eps]."""
    _check_shapes(p, g)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return _image_mean(-(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)))


def combined_loss(
    weights: EpochLossWeights,
    intermediate: Optional[torch.Tensor],
    final: Optional[torch.Tensor],
    g: torch.Tensor,
) -> torch.Tensor:
    """w1 * L1(intermediate) + w2 * L2(final).

    The inactive output may be ``None``; its term is never evaluated and
    contributes exactly zero.
    """
    if weights.w1:
        if intermediate is None:
            raise ValueError("L1 epoch requires the backbone output")
        return loss_mse(intermediate, g)
    if final is None:
        raise ValueError("L2 epoch requires the refined output")
    return loss_bce(final, g)
