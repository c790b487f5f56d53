"""Lightweight fire-module backbone emitting a five-level feature pyramid.

The extractor is a streamlined fire-block design: every block squeezes with a
1x1 convolution and expands with a single depthwise-separable 3x3 stage; there
is no parallel 1x1 expansion branch anywhere.
"""

from dataclasses import dataclass
from typing import Dict, NamedTuple, Tuple

import torch
from torch import nn

from .layers import (
    ConvBNAct,
    DepthwiseSeparableConv,
    conv_weight_params,
    init_conv_weights,
)

LEVEL_NAMES = ("P3", "P4", "P5", "P6", "P7")
LEVEL_STRIDES = {"P3": 8, "P4": 16, "P5": 32, "P6": 64, "P7": 128}

DEFAULT_STAGE_SPECS = ((2, 64), (2, 128), (3, 192), (2, 256))


def count_params_standard(m, n, c):
    """Weight count of a standard convolution: m kernels of n*n*c."""
    _check_positive(m=m, n=n, c=c)
    return m * n * n * c


def count_params_depthwise(m, n, c):
    """Weight count of a depthwise-separable convolution, m*n^2 + m*c.

    The depthwise stage is counted with m kernels. With m != c this differs
    from the c*n^2 a per-input-channel implementation actually holds; the two
    coincide whenever m == c, which is how the fire blocks use it.
    """
    _check_positive(m=m, n=n, c=c)
    return m * n * n + m * c


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if not isinstance(value, int) or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    stem_channels: int = 32
    stage_specs: Tuple[Tuple[int, int], ...] = DEFAULT_STAGE_SPECS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_specs", tuple(map(tuple, self.stage_specs)))
        if self.input_channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        # Four fire stages plus the two extra downsamples yield the five
        # pyramid levels P3..P7 at strides 8..128.
        if len(self.stage_specs) != 4:
            raise ValueError("expected exactly 4 stage specs")
        for num_blocks, out_channels in self.stage_specs:
            if num_blocks < 1 or out_channels < 1:
                raise ValueError("stage specs must be positive")


class LevelFeature(NamedTuple):
    feature: torch.Tensor
    stride: int


@dataclass
class FeatureMapSet:
    """Pyramid levels P3..P7 with their strides relative to the input."""

    levels: Dict[str, LevelFeature]

    def channels(self) -> Dict[str, int]:
        return {name: lf.feature.shape[1] for name, lf in self.levels.items()}


class FireBlock(nn.Module):
    """Squeeze 1x1 then a single depthwise-separable 3x3 expansion."""

    def __init__(self, channels, squeeze_ratio=4):
        super().__init__()
        squeeze_channels = max(channels // squeeze_ratio, 8)
        self.squeeze = ConvBNAct(channels, squeeze_channels, kernel_size=1)
        self.expand = DepthwiseSeparableConv(squeeze_channels, channels)

    def forward(self, x):
        return self.expand(self.squeeze(x))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.stem = ConvBNAct(config.input_channels, config.stem_channels, stride=2)
        stages = []
        in_channels = config.stem_channels
        for num_blocks, out_channels in config.stage_specs:
            blocks = [DepthwiseSeparableConv(in_channels, out_channels, stride=2)]
            blocks.extend(FireBlock(out_channels) for _ in range(num_blocks))
            stages.append(nn.Sequential(*blocks))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)
        self.extra6 = DepthwiseSeparableConv(in_channels, in_channels, stride=2)
        self.extra7 = DepthwiseSeparableConv(in_channels, in_channels, stride=2)
        init_conv_weights(self, config.seed)

    @property
    def out_channels(self) -> Dict[str, int]:
        c2 = self.config.stage_specs[1][1]
        c3 = self.config.stage_specs[2][1]
        c4 = self.config.stage_specs[3][1]
        return {"P3": c2, "P4": c3, "P5": c4, "P6": c4, "P7": c4}

    def weight_param_count(self):
        """Bias-free convolution weight count (the analytic-oracle figure)."""
        return conv_weight_params(self)

    def param_count(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def forward(self, images) -> FeatureMapSet:
        feats = {}
        x = self.stem(images)
        x = self.stages[0](x)
        x = self.stages[1](x)
        feats["P3"] = LevelFeature(x, 8)
        x = self.stages[2](x)
        feats["P4"] = LevelFeature(x, 16)
        x = self.stages[3](x)
        feats["P5"] = LevelFeature(x, 32)
        x = self.extra6(x)
        feats["P6"] = LevelFeature(x, 64)
        x = self.extra7(x)
        feats["P7"] = LevelFeature(x, 128)
        return FeatureMapSet(feats)


def build_backbone(config: BackboneConfig = None) -> Backbone:
    return Backbone(config or BackboneConfig())


def extract_features(backbone: Backbone, images: torch.Tensor) -> FeatureMapSet:
    """Run the backbone after validating the input contract."""
    if images.ndim != 4:
        raise ValueError(f"expected rank-4 input, got rank {images.ndim}")
    h, w = images.shape[2], images.shape[3]
    if h % 128 != 0 or w % 128 != 0:
        raise ValueError(f"spatial size {h}x{w} must be divisible by 128")
    return backbone(images)
