"""Encoder-decoder backbones mapping (N, 3, H, W) images to (N, 1, H, W) probabilities.

Three families are available, scaled by ``base_channels`` and ``depth``:

- ``unet``: symmetric encoder/decoder with transposed-conv upsampling and
  concatenated skips.
- ``unetpp``: nested dense skip pathways, single output head.
- ``segnet``: max-pool indices reused for unpooling, no skip features.

Every convolution feeding a batch norm is bias-free; all heads end in a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError
from .tensors import ImageTensor, ProbMap


class BackboneKind(str, Enum):
    UNET = "unet"
    UNETPP = "unetpp"
    SEGNET = "segnet"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    BackboneKind.UNET: "UNet",
    BackboneKind.UNETPP: "UNet++",
    BackboneKind.SEGNET: "SegNet",
}


@dataclass(frozen=True)
class BackboneConfig:
    kind: BackboneKind = BackboneKind.UNET
    base_channels: int = 16
    depth: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", BackboneKind(self.kind))
        except ValueError:
            raise ConfigError(
                f"Unsupported backbone kind {self.kind!r}; "
                f"expected one of {[k.value for k in BackboneKind]}"
            )
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")

    @property
    def stride(self) -> int:
        """Input H and W must be divisible by this."""
        return 2 ** self.depth

    def check_input_size(self, h: int, w: int) -> None:
        if h % self.stride or w % self.stride:
            raise ShapeMismatchError(
                f"{self.kind.value} depth {self.depth} needs H, W divisible by "
                f"{self.stride}, got {h}x{w}"
            )
        # 1x1 bottlenecks break BatchNorm on single-sample batches
        if min(h, w) < 2 * self.stride:
            raise ShapeMismatchError(
                f"{self.kind.value} depth {self.depth} needs H, W >= {2 * self.stride} "
                f"(bottleneck at least 2x2), got {h}x{w}"
            )

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> BackboneConfig:
        return cls(**d)


def _conv_bn_relu(in_ch: int, out_ch: int) -> List[nn.Module]:
    return [
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    ]


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, mid_ch: Optional[int] = None) -> None:
        super().__init__()
        mid_ch = mid_ch or out_ch
        self.block = nn.Sequential(*_conv_bn_relu(in_ch, mid_ch), *_conv_bn_relu(mid_ch, out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class Backbone(nn.Module):
    """Common base: holds the config and validates input geometry."""

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(f"Backbone expects (N, 3, H, W), got {tuple(x.shape)}")
        self.config.check_input_size(x.shape[-2], x.shape[-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return torch.sigmoid(self.logits(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class UNet(Backbone):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__(config)
        ch = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList(
            [DoubleConv(3 if i == 0 else ch[i - 1], ch[i]) for i in range(config.depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(ch[-2], ch[-1])
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], kernel_size=2, stride=2)
             for i in reversed(range(config.depth))]
        )
        self.decoders = nn.ModuleList(
            [DoubleConv(ch[i] * 2, ch[i]) for i in reversed(range(config.depth))]
        )
        self.head = nn.Conv2d(ch[0], 1, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class UNetPlusPlus(Backbone):
    """Nested U-Net; node (i, j) sits at resolution level i, column j."""

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__(config)
        depth = config.depth
        ch = [config.base_channels * 2 ** i for i in range(depth + 1)]
        self.pool = nn.MaxPool2d(2)
        self.nodes = nn.ModuleDict()
        for i in range(depth + 1):
            for j in range(depth + 1 - i):
                if j == 0:
                    in_ch = 3 if i == 0 else ch[i - 1]
                else:
                    in_ch = ch[i] * j + ch[i + 1]
                self.nodes[f"x{i}_{j}"] = DoubleConv(in_ch, ch[i])
        self.head = nn.Conv2d(ch[0], 1, kernel_size=1)

    @staticmethod
    def _up(x: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        depth = self.config.depth
        grid: Dict[Tuple[int, int], torch.Tensor] = {}
        for i in range(depth + 1):
            inp = x if i == 0 else self.pool(grid[(i - 1, 0)])
            grid[(i, 0)] = self.nodes[f"x{i}_0"](inp)
        for j in range(1, depth + 1):
            for i in range(depth + 1 - j):
                feats = [grid[(i, k)] for k in range(j)]
                feats.append(self._up(grid[(i + 1, j - 1)]))
                grid[(i, j)] = self.nodes[f"x{i}_{j}"](torch.cat(feats, dim=1))
        return self.head(grid[(0, depth)])


class SegNet(Backbone):
    """Encoder stages pool with indices; decoder stages unpool with those indices."""

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__(config)
        ch = [config.base_channels * 2 ** i for i in range(config.depth)]
        self.encoders = nn.ModuleList(
            [DoubleConv(3 if i == 0 else ch[i - 1], ch[i]) for i in range(config.depth)]
        )
        self.decoders = nn.ModuleList(
            [DoubleConv(ch[i], ch[max(i - 1, 0)], mid_ch=ch[i])
             for i in reversed(range(config.depth))]
        )
        self.head = nn.Conv2d(ch[0], 1, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        indices = []
        sizes = []
        for enc in self.encoders:
            x = enc(x)
            sizes.append(x.size())
            x, idx = F.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)
            indices.append(idx)
        for dec, idx, size in zip(self.decoders, reversed(indices), reversed(sizes)):
            x = F.max_unpool2d(x, idx, kernel_size=2, stride=2, output_size=size)
            x = dec(x)
        return self.head(x)


_BUILDERS = {
    BackboneKind.UNET: UNet,
    BackboneKind.UNETPP: UNetPlusPlus,
    BackboneKind.SEGNET: SegNet,
}


def build_backbone(
    cfg: BackboneConfig, input_size: Optional[Tuple[int, int]] = None
) -> Backbone:
    """Construct a backbone with parameters initialized from ``cfg.seed``.

    The global torch RNG is forked, so building does not disturb callers.
    """
    if input_size is not None:
        cfg.check_input_size(*input_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return _BUILDERS[cfg.kind](cfg)


def backbone_forward(
    b: Backbone, img: Union[ImageTensor, torch.Tensor]
) -> Union[ProbMap, torch.Tensor]:
    """Run the backbone.

    Tensors in, tensors out (differentiable). An :class:`ImageTensor` is run
    as a batch of one without gradients and returned as a :class:`ProbMap`.
    """
    if isinstance(img, ImageTensor):
        with torch.no_grad():
            out = b(torch.from_numpy(img.data.copy()).unsqueeze(0))
        return ProbMap(out[0].numpy(), check=False)
    return b(img)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
