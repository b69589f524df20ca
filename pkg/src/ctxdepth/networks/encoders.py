"""Feature-pyramid encoders.

Every encoder emits 5 feature maps at strides 2, 4, 8, 16, 32 and exposes
their channel counts via `.channels`. The efficientnet-shaped variants
reproduce the published stage layout (MBConv expansions, kernel sizes,
strides, repeats) with random initialization; pretrained weights can be
loaded from a checkpoint archive but are never required.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

ENCODER_KINDS = ("efficientnet-b0-shape", "efficientnet-b1-shape", "tiny")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "efficientnet-b0-shape"

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}, expected one of {ENCODER_KINDS}")


class SqueezeExcite(nn.Module):
    """The MBConv-internal squeeze-excite, sized from the block input width."""

    def __init__(self, channels, se_channels):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, se_channels, 1)
        self.act = nn.SiLU(inplace=True)
        self.expand = nn.Conv2d(se_channels, channels, 1)
        self.gate = nn.Sigmoid()

    def forward(self, x):
        return x * self.gate(self.expand(self.act(self.reduce(self.pool(x)))))


class MBConv(nn.Module):
    """Inverted residual block: expand 1x1, depthwise kxk, squeeze-excite,
    project 1x1, with a skip connection when the shape is preserved."""

    def __init__(self, in_channels, out_channels, expand_ratio, kernel_size, stride):
        super().__init__()
        hidden = in_channels * expand_ratio
        self.use_skip = stride == 1 and in_channels == out_channels

        layers = []
        if expand_ratio != 1:
            layers += [
                nn.Conv2d(in_channels, hidden, 1, bias=False),
                nn.BatchNorm2d(hidden),
                nn.SiLU(inplace=True),
            ]
        layers += [
            nn.Conv2d(
                hidden,
                hidden,
                kernel_size,
                stride=stride,
                padding=kernel_size // 2,
                groups=hidden,
                bias=False,
            ),
            nn.BatchNorm2d(hidden),
            nn.SiLU(inplace=True),
            SqueezeExcite(hidden, max(1, in_channels // 4)),
            nn.Conv2d(hidden, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        ]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_skip else out


# (expand_ratio, out_channels, repeats, stride, kernel_size) per stage; the
# b1 shape keeps the widths and deepens the repeats.
_STAGES = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
]
_B1_REPEATS = [2, 3, 3, 4, 4, 5, 2]
# stages after which a pyramid level is emitted (strides 2..32)
_TAP_AFTER_STAGE = {0: 0, 1: 1, 2: 2, 4: 3, 6: 4}


class EfficientNetShapeEncoder(nn.Module):
    channels = (16, 24, 40, 112, 320)

    def __init__(self, variant="b0"):
        super().__init__()
        if variant not in ("b0", "b1"):
            raise ValueError(f"variant must be 'b0' or 'b1', got {variant!r}")
        self.variant = variant
        self.stem = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(32),
            nn.SiLU(inplace=True),
        )
        stages = []
        in_ch = 32
        for stage_idx, (expand, out_ch, repeats, stride, kernel) in enumerate(_STAGES):
            if variant == "b1":
                repeats = _B1_REPEATS[stage_idx]
            blocks = []
            for block_idx in range(repeats):
                blocks.append(
                    MBConv(in_ch, out_ch, expand, kernel, stride if block_idx == 0 else 1)
                )
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        features = []
        x = self.stem(x)
        for stage_idx, stage in enumerate(self.stages):
            x = stage(x)
            if stage_idx in _TAP_AFTER_STAGE:
                features.append(x)
        return features


class TinyEncoder(nn.Module):
    """A one-conv-per-level pyramid for fast CPU experiments."""

    channels = (16, 24, 32, 48, 64)

    def __init__(self):
        super().__init__()
        levels = []
        in_ch = 3
        for out_ch in self.channels:
            levels.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ELU(inplace=True),
                )
            )
            in_ch = out_ch
        self.levels = nn.ModuleList(levels)

    def forward(self, x):
        features = []
        for level in self.levels:
            x = level(x)
            features.append(x)
        return features


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.kind == "efficientnet-b0-shape":
        return EfficientNetShapeEncoder("b0")
    if cfg.kind == "efficientnet-b1-shape":
        return EfficientNetShapeEncoder("b1")
    return TinyEncoder()
