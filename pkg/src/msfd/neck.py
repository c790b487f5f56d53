"""Matrix feature pyramid: rectangular layers grown off the FPN diagonal.

Layer (i, j) halves the diagonal's width i-1 times and its height j-1 times.
Cells with |i - j| > 2 are pruned; this band rule is what reproduces the
19/14/9/4 layer counts for base ranges P3-P7 down to P6-P7.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import torch
from torch import nn

from .backbone import LEVEL_NAMES, LEVEL_STRIDES, FeatureMapSet
from .layers import BottleneckDown, ChannelAttention, conv_weight_params, init_conv_weights

BASE_RANGES = {
    "P3-P7": ("P3", "P4", "P5", "P6", "P7"),
    "P4-P7": ("P4", "P5", "P6", "P7"),
    "P5-P7": ("P5", "P6", "P7"),
    "P6-P7": ("P6", "P7"),
}

ALLOWED_CHANNELS = (64, 96, 128, 192, 256)

PRUNE_BAND = 2


@dataclass(frozen=True, order=True)
class MatrixLayerId:
    """1-based grid coordinates: i counts width halvings, j height halvings."""

    i: int
    j: int

    def __str__(self):
        return f"({self.i},{self.j})"


@dataclass(frozen=True)
class MfpConfig:
    base_range: str = "P3-P7"
    channels: int = 96
    bottleneck_mid_channels: Optional[int] = None
    attention_reduction: int = 4
    diagonal_only: bool = False  # plain-FPN ablation: keep only (k, k) cells
    # Keep the pruned cells' generation blocks allocated but frozen, so the
    # diagonal-only ablation holds model size constant.
    retain_frozen: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.base_range not in BASE_RANGES:
            raise ValueError(f"unknown base_range {self.base_range!r}")
        if self.channels not in ALLOWED_CHANNELS:
            raise ValueError(f"channels must be one of {ALLOWED_CHANNELS}")
        if self.bottleneck_mid_channels is None:
            object.__setattr__(self, "bottleneck_mid_channels", self.channels // 2)
        if not 0 < self.bottleneck_mid_channels < self.channels:
            raise ValueError("bottleneck_mid_channels must be in (0, channels)")
        if self.attention_reduction < 1:
            raise ValueError("attention_reduction must be positive")

    @property
    def base_levels(self) -> Tuple[str, ...]:
        return BASE_RANGES[self.base_range]

    @property
    def base_strides(self) -> Tuple[int, ...]:
        return tuple(LEVEL_STRIDES[name] for name in self.base_levels)

    def layer_ids(self) -> List[MatrixLayerId]:
        ids = enumerate_layers(self.base_range)
        if self.diagonal_only:
            ids = [lid for lid in ids if lid.i == lid.j]
        return ids


def enumerate_layers(base_range) -> List[MatrixLayerId]:
    """All (i, j) with 1 <= i, j <= B and |i - j| <= 2, row-major order.

    ``base_range`` is a range name like "P4-P7" or the base-level count B.
    """
    if isinstance(base_range, str):
        b = len(BASE_RANGES[base_range])
    else:
        b = int(base_range)
        if b < 1:
            raise ValueError("base level count must be positive")
    return [
        MatrixLayerId(i, j)
        for j in range(1, b + 1)
        for i in range(1, b + 1)
        if abs(i - j) <= PRUNE_BAND
    ]


def bottleneck_params(channels):
    """Bias-free weight count of the 1x1 / 3x3 / 1x1 bottleneck at width C.

    C*(C/2) + (C/2)*9*(C/2) + (C/2)*C; 29952 at C = 96 versus 82944 for the
    plain 3x3 it replaces.
    """
    if channels < 2 or channels % 2 != 0:
        raise ValueError(f"channels must be even and >= 2, got {channels}")
    mid = channels // 2
    return channels * mid + mid * 9 * mid + mid * channels


def layer_strides(base_strides: Tuple[int, ...], layer: MatrixLayerId) -> Tuple[int, int]:
    """(stride_w, stride_h) of a matrix cell.

    The diagonal (k, k) carries the k-th base stride on both axes; each step
    right doubles stride_w only, each step down doubles stride_h only.
    """
    base = min(layer.i, layer.j)
    s = base_strides[base - 1]
    return s * 2 ** (layer.i - base), s * 2 ** (layer.j - base)


class MatrixFeature(NamedTuple):
    feature: torch.Tensor
    stride_w: int
    stride_h: int


@dataclass
class MatrixFeatureSet:
    layers: Dict[MatrixLayerId, MatrixFeature]


class Mfp(nn.Module):
    """Generates the matrix layers from backbone features.

    Each base level passes through channel attention then a 1x1 lateral
    projection to C channels, forming the diagonal. Off-diagonal cells are
    produced by chained single-axis bottleneck downsamplings from the
    nearest diagonal cell.
    """

    def __init__(self, config: MfpConfig, backbone_channels: Dict[str, int]):
        super().__init__()
        self.config = config
        missing = [lv for lv in config.base_levels if lv not in backbone_channels]
        if missing:
            raise ValueError(f"backbone does not provide levels {missing}")

        self.attention = nn.ModuleDict()
        self.lateral = nn.ModuleDict()
        for level in config.base_levels:
            in_ch = backbone_channels[level]
            self.attention[level] = ChannelAttention(in_ch, config.attention_reduction)
            self.lateral[level] = nn.Conv2d(in_ch, config.channels, 1, bias=False)

        # One generation block per off-diagonal cell, keyed "i_j". With
        # retain_frozen, blocks for suppressed cells exist but never train.
        active = set(config.layer_ids())
        build_ids = enumerate_layers(config.base_range) if config.retain_frozen else config.layer_ids()
        self.gen_blocks = nn.ModuleDict()
        for lid in build_ids:
            if lid.i == lid.j:
                continue
            stride = (1, 2) if lid.i > lid.j else (2, 1)
            block = BottleneckDown(config.channels, config.bottleneck_mid_channels, stride)
            if lid not in active:
                for p in block.parameters():
                    p.requires_grad_(False)
            self.gen_blocks[f"{lid.i}_{lid.j}"] = block
        init_conv_weights(self, config.seed)

    def weight_param_count(self):
        return conv_weight_params(self)

    def forward(self, features: FeatureMapSet) -> MatrixFeatureSet:
        cfg = self.config
        strides = cfg.base_strides
        out: Dict[MatrixLayerId, MatrixFeature] = {}
        for k, level in enumerate(cfg.base_levels, start=1):
            if level not in features.levels:
                raise ValueError(f"feature set is missing base level {level}")
            x = features.levels[level].feature
            x = self.lateral[level](self.attention[level](x))
            sw, sh = layer_strides(strides, MatrixLayerId(k, k))
            out[MatrixLayerId(k, k)] = MatrixFeature(x, sw, sh)

        # Grow outward band by band so every parent exists before its child.
        for band in range(1, PRUNE_BAND + 1):
            for lid in cfg.layer_ids():
                if abs(lid.i - lid.j) != band:
                    continue
                parent = (
                    MatrixLayerId(lid.i - 1, lid.j)
                    if lid.i > lid.j
                    else MatrixLayerId(lid.i, lid.j - 1)
                )
                x = self.gen_blocks[f"{lid.i}_{lid.j}"](out[parent].feature)
                sw, sh = layer_strides(strides, lid)
                out[lid] = MatrixFeature(x, sw, sh)
        return MatrixFeatureSet(out)


def build_mfp(config: MfpConfig, backbone_channels: Dict[str, int]) -> Mfp:
    return Mfp(config, backbone_channels)


ASSIGN_ALPHA = 24  # target mapped extent: an ideal box spans ~24 cells


def assign_box_to_layer(w, h, config: MfpConfig) -> MatrixLayerId:
    """Pick the matrix cell whose strides best match a box's width/height.

    Minimizes |log2(w / (alpha*stride_w))| + |log2(h / (alpha*stride_h))|
    over the configured cells; ties break toward smaller i + j, then
    smaller i. Out-of-range boxes clamp to the band edge naturally.
    """
    if w < 1 or h < 1:
        raise ValueError("box must be at least 1x1 pixels")
    strides = config.base_strides
    best = None
    for lid in config.layer_ids():
        sw, sh = layer_strides(strides, lid)
        cost = abs(math.log2(w / (ASSIGN_ALPHA * sw))) + abs(
            math.log2(h / (ASSIGN_ALPHA * sh))
        )
        key = (cost, lid.i + lid.j, lid.i)
        if best is None or key < best[0]:
            best = (key, lid)
    return best[1]
