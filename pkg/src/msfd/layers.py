"""Shared convolutional building blocks."""

import math

import torch
from torch import nn


class ConvBNAct(nn.Module):
    """Standard convolution followed by batch norm and ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            padding=kernel_size // 2,
            bias=False,
        )
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class DepthwiseSeparableConv(nn.Module):
    """Depthwise 3x3 convolution followed by a pointwise 1x1 mix.

    Both stages are bias-free and carry batch norm + ReLU.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels,
            in_channels,
            kernel_size,
            stride=stride,
            padding=kernel_size // 2,
            groups=in_channels,
            bias=False,
        )
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.act(self.bn1(self.depthwise(x)))
        return self.act(self.bn2(self.pointwise(x)))


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: global average pool, two FC layers, sigmoid.

    The output is the input scaled per channel by a gate in (0, 1), so the
    block is a contraction on magnitudes.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(
                f"channels ({channels}) must be divisible by reduction ({reduction})"
            )
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"expected rank-4 input, got rank {x.ndim}")
        squeezed = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(self.act(self.fc1(squeezed))))
        return x * gate[:, :, None, None]


class BottleneckDown(nn.Module):
    """1x1 reduce / strided 3x3 / 1x1 restore sandwich.

    ``stride`` is (stride_h, stride_w); the matrix pyramid uses (1, 2) to
    halve width only and (2, 1) to halve height only.
    """

    def __init__(self, channels, mid_channels, stride):
        super().__init__()
        self.reduce = nn.Conv2d(channels, mid_channels, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_channels)
        self.conv = nn.Conv2d(
            mid_channels, mid_channels, 3, stride=stride, padding=1, bias=False
        )
        self.bn2 = nn.BatchNorm2d(mid_channels)
        self.restore = nn.Conv2d(mid_channels, channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.act(self.bn1(self.reduce(x)))
        x = self.act(self.bn2(self.conv(x)))
        return self.act(self.bn3(self.restore(x)))


def conv_weight_params(module):
    """Sum of convolution/linear kernel weights, excluding biases and norms.

    This is the bias-free count the analytic formulas describe.
    """
    total = 0
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            total += m.weight.numel()
    return total


def init_conv_weights(module, seed):
    """Fan-in-scaled normal init for conv/linear weights, zeros for biases.

    Seeded explicitly so construction is reproducible regardless of global
    RNG state. Batch norm layers get weight 1 / bias 0.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
