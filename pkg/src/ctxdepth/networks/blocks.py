"""Building blocks shared by the encoder and decoder.

Decoder blocks are normalization-free with ELU activations; separable
convolutions (depthwise then pointwise) keep them parameter-light.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def attention_reduction(width: int) -> int:
    """Reduction ratio for channel attention: gentler on narrow features so
    the bottleneck never collapses to zero width."""
    return 4 if width < 64 else 16


class SeparableConv2d(nn.Module):
    """Depthwise k x k followed by pointwise 1 x 1."""

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
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=True)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class SepConvBlock(nn.Module):
    """Separable convolution + ELU, width-preserving by default."""

    def __init__(self, in_channels, out_channels=None, stride=1):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        self.conv = SeparableConv2d(in_channels, out_channels, stride=stride)
        self.act = nn.ELU(inplace=True)

    def forward(self, x):
        return self.act(self.conv(x))


class UpsampleBlock(nn.Module):
    """Nearest-neighbor x2 upsample followed by a separable convolution."""

    def __init__(self, channels):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = SepConvBlock(channels)

    def forward(self, x):
        return self.conv(self.upsample(x))


class DownsampleBlock(nn.Module):
    """Stride-2 separable convolution."""

    def __init__(self, channels):
        super().__init__()
        self.conv = SepConvBlock(channels, stride=2)

    def forward(self, x):
        return self.conv(x)


class ExtractBlock(nn.Module):
    """1 x 1 convolution + norm + activation that unifies an encoder feature
    to the decoder's per-level width."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.ELU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: global average pool -> bottleneck -> expand ->
    sigmoid, multiplied back onto the feature map per channel."""

    def __init__(self, channels, reduction=None):
        super().__init__()
        if channels < 1:
            raise ValueError("channel attention needs at least one channel")
        reduction = attention_reduction(channels) if reduction is None else reduction
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.act = nn.ELU(inplace=True)
        self.excite = nn.Conv2d(hidden, channels, 1)
        self.gate = nn.Sigmoid()

    def forward(self, x):
        weights = self.gate(self.excite(self.act(self.squeeze(self.pool(x)))))
        return x * weights
