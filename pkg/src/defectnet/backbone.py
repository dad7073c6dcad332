"""Residual feature extractor producing the C2..C5 feature set."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

LEVELS = (2, 3, 4, 5)


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    stage_channels: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (1, 1, 1, 1)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if self.stem_channels < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("stem_channels and blocks_per_stage must be positive")

    @property
    def strides(self) -> tuple:
        # stem 4, then stage strides 1, 2, 2, 2
        return (4, 8, 16, 32)


@dataclass
class FeatureSet:
    """Four feature maps keyed by pyramid level 2..5 (stride 2**level)."""

    maps: dict = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level]

    def levels(self):
        return sorted(self.maps)

    def stride(self, level: int) -> int:
        return 2**level

    def shapes(self) -> dict:
        return {lv: self.maps[lv].shape for lv in self.levels()}


class ResidualBlock(Module):
    """Two 3x3 conv/BN layers plus an identity or 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError(f"residual block stride must be 1 or 2, got {stride}")
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride=stride, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = x if self.proj is None else self.proj(x)
        return T.relu(T.add(h, shortcut))


class Backbone(Module):
    def __init__(self, config: BackboneConfig | None = None):
        self.config = config or BackboneConfig()
        cfg = self.config
        self.stem_conv = Conv2d(1, cfg.stem_channels, 7, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(cfg.stem_channels)
        self.stages = []
        cin = cfg.stem_channels
        for i, (cout, nblocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            stage_stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(cin, cout, stage_stride)]
            blocks += [ResidualBlock(cout, cout, 1) for _ in range(nblocks - 1)]
            self.stages.append(Stage(blocks))
            cin = cout

    def stem(self, image: Tensor) -> Tensor:
        """7x7/2 conv, BN, relu, 3x3/2 max-pool: output stride 4."""
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"stem: expected [N,1,H,W] grayscale input, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"stem: image height and width must be divisible by 32, got {h}x{w}")
        x = T.relu(self.stem_bn(self.stem_conv(image)))
        return T.pool2d(x, "max", 3, 3, stride=2, padding=1)

    def extract_levels(self, image: Tensor) -> FeatureSet:
        x = self.stem(image)
        maps = {}
        for level, stage in zip(LEVELS, self.stages):
            x = stage(x)
            maps[level] = x
        return FeatureSet(maps)

    __call__ = extract_levels


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x
