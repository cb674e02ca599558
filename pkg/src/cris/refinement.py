"""Fully convolutional refinement head and its composition with a backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, Tuple, Union

import torch
import torch.nn as nn

from .backbones import Backbone
from .errors import ConfigError, ShapeMismatchError
from .tensors import ProbMap


@dataclass(frozen=True)
class RefinementConfig:
    expand_channels: int = 32
    kernel_sizes: Tuple[int, ...] = (7, 5, 3)
    dropout_p: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        ks = tuple(int(k) for k in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", ks)
        if self.expand_channels < 1:
            raise ConfigError(f"expand_channels must be positive, got {self.expand_channels}")
        if not ks:
            raise ConfigError("kernel_sizes must not be empty")
        for k in ks:
            if k < 3 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 3, got {k} in {list(ks)}")
        if any(a <= b for a, b in zip(ks, ks[1:])):
            raise ConfigError(f"kernel_sizes must be strictly decreasing, got {list(ks)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def min_size(self) -> int:
        return self.kernel_sizes[0]

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> RefinementConfig:
        return cls(**{**d, "kernel_sizes": tuple(d["kernel_sizes"])})


class RefinementModule(nn.Module):
    """1x1 expansion, same-padded convs with decreasing kernels, 1x1 projection.

    Each conv+ReLU block is followed by dropout; the final projection feeds
    the sigmoid directly.
    """

    def __init__(self, config: RefinementConfig) -> None:
        super().__init__()
        self.config = config
        c = config.expand_channels
        layers = [nn.Conv2d(1, c, kernel_size=1), nn.ReLU(), nn.Dropout(config.dropout_p)]
        for k in config.kernel_sizes:
            layers += [nn.Conv2d(c, c, kernel_size=k, padding=k // 2), nn.ReLU(),
                       nn.Dropout(config.dropout_p)]
        layers += [nn.Conv2d(c, 1, kernel_size=1), nn.Sigmoid()]
        self.layers = nn.Sequential(*layers)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.ndim != 4 or p.shape[1] != 1:
            raise ShapeMismatchError(f"Refinement expects (N, 1, H, W), got {tuple(p.shape)}")
        h, w = p.shape[-2:]
        if h < self.config.min_size or w < self.config.min_size:
            raise ShapeMismatchError(
                f"Input {h}x{w} smaller than largest kernel {self.config.min_size}"
            )
        return self.layers(p)


def build_refinement(cfg: RefinementConfig) -> RefinementModule:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return RefinementModule(cfg)


def refine(
    m: nn.Module, p: Union[ProbMap, torch.Tensor]
) -> Union[ProbMap, torch.Tensor]:
    """Refine a probability map. Same tensor/ProbMap convention as ``backbone_forward``."""
    if isinstance(p, ProbMap):
        with torch.no_grad():
            out = m(torch.from_numpy(p.data.copy()).unsqueeze(0))
        return ProbMap(out[0].numpy(), check=False)
    return m(p)


class FullModel(nn.Module):
    """Backbone followed by a refinement head; forward returns both outputs."""

    def __init__(self, backbone: Backbone, refinement: nn.Module) -> None:
        super().__init__()
        self.backbone = backbone
        self.refinement = refinement

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        intermediate = self.backbone(x)
        return intermediate, self.refinement(intermediate)


def compose(b: Backbone, m: nn.Module) -> FullModel:
    return FullModel(b, m)
