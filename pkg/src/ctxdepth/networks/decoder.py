"""The contextual feature-fusion decoder.

The decoder is a triangular grid of nodes indexed by (level, stage). Level i
lives at 1/2^i of the input resolution; stage 0 holds the width-unified
encoder features. Each later node consumes ONLY stage j-1 neighbors at
levels i-1, i, i+1 -- there are no long-range skip connections -- and the
deepest level drops out at every stage:

    stage 0: levels 1..5   (extract blocks)
    stage 1: levels 1..4
    stage 2: levels 1..3
    stage 3: levels 1..2
    stage 4: level  1

The last node of each level (the node about to drop out) feeds a disparity
branch: x2 upsample, channel attention, separable convolution to one
channel, sigmoid. Output scale s therefore sits at 1/2^s of the input, with
scale 0 at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import (
    ChannelAttention,
    DownsampleBlock,
    ExtractBlock,
    SeparableConv2d,
    SepConvBlock,
    UpsampleBlock,
)


@dataclass(frozen=True)
class DecoderConfig:
    """Per-level unified widths and output-head layout.

    widths[i-1] is the channel count of every level-i node. The fuse
    convolution is 3x3 at the finest `fine_fuse_levels` levels and 1x1 on
    the coarser ones, which concentrates the parameter budget where spatial
    detail lives.
    """

    widths: tuple = (32, 64, 64, 128, 256)
    num_output_scales: int = 4
    fine_fuse_levels: int = 2

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        if self.num_output_scales > len(self.widths) - 1:
            raise ValueError(
                f"{self.num_output_scales} output scales need at least "
                f"{self.num_output_scales + 1} levels"
            )

    @property
    def num_levels(self) -> int:
        return len(self.widths)


def halved(cfg: DecoderConfig) -> DecoderConfig:
    return DecoderConfig(
        widths=tuple(max(w // 2, 1) for w in cfg.widths),
        num_output_scales=cfg.num_output_scales,
        fine_fuse_levels=cfg.fine_fuse_levels,
    )


def grid_schedule(num_levels: int, num_stages: int):
    """Levels present at each stage, stage 0 being the extract row."""
    return {stage: list(range(1, num_levels - stage + 1)) for stage in range(num_stages + 1)}


class FusionNode(nn.Module):
    """One grid node: lift the coarser neighbor, keep the same level,
    drop the finer neighbor (when it exists), concatenate, fuse."""

    def __init__(self, up_channels, same_channels, down_channels, out_channels, fuse_kernel):
        super().__init__()
        self.up = UpsampleBlock(up_channels)
        self.same = SepConvBlock(same_channels)
        self.down = DownsampleBlock(down_channels) if down_channels else None
        concat = up_channels + same_channels + down_channels
        self.fuse = nn.Sequential(
            nn.Conv2d(concat, out_channels, fuse_kernel, padding=fuse_kernel // 2),
            nn.ELU(inplace=True),
        )

    def forward(self, up_in, same_in, down_in=None):
        h, w = same_in.shape[-2:]
        if up_in.shape[-2:] != (h // 2, w // 2):
            raise ValueError(
                f"coarser input {tuple(up_in.shape[-2:])} is not half of {h}x{w}"
            )
        if self.down is None:
            if down_in is not None:
                raise ValueError("node built without a finer input got one")
            parts = [self.up(up_in), self.same(same_in)]
        else:
            if down_in is None:
                raise ValueError("node at level > 1 requires the finer input")
            if down_in.shape[-2:] != (h * 2, w * 2):
                raise ValueError(
                    f"finer input {tuple(down_in.shape[-2:])} is not double {h}x{w}"
                )
            parts = [self.up(up_in), self.same(same_in), self.down(down_in)]
        return self.fuse(torch.cat(parts, dim=1))


class DisparityBranch(nn.Module):
    """Upsample x2, gate with channel attention, project to a sigmoid map."""

    def __init__(self, channels):
        super().__init__()
        self.upsample = UpsampleBlock(channels)
        self.attention = ChannelAttention(channels)
        self.project = SeparableConv2d(channels, 1)
        self.activation = nn.Sigmoid()

    def forward(self, x):
        return self.activation(self.project(self.attention(self.upsample(x))))


class FusionDecoder(nn.Module):
    def __init__(self, encoder_channels, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        if len(encoder_channels) != cfg.num_levels:
            raise ValueError(
                f"encoder provides {len(encoder_channels)} levels, config expects {cfg.num_levels}"
            )
        self.cfg = cfg
        num_levels = cfg.num_levels
        self.num_stages = num_levels - 1
        self.schedule = grid_schedule(num_levels, self.num_stages)
        widths = cfg.widths

        self.extracts = nn.ModuleList(
            ExtractBlock(enc_ch, width) for enc_ch, width in zip(encoder_channels, widths)
        )

        self.nodes = nn.ModuleDict()
        for stage in range(1, self.num_stages + 1):
            for level in self.schedule[stage]:
                kernel = 3 if level <= cfg.fine_fuse_levels else 1
                self.nodes[f"l{level}s{stage}"] = FusionNode(
                    up_channels=widths[level],          # level + 1
                    same_channels=widths[level - 1],
                    down_channels=widths[level - 2] if level > 1 else 0,
                    out_channels=widths[level - 1],
                    fuse_kernel=kernel,
                )

        # output scale s comes from the final node of level s+1
        self.branches = nn.ModuleList(
            DisparityBranch(widths[scale]) for scale in range(cfg.num_output_scales)
        )

    def final_stage(self, level: int) -> int:
        """The last stage at which a level still has a node."""
        return self.cfg.num_levels - level

    def fusion_edges(self):
        """Every (source_level, target_level) pair in the graph, including
        the extract row and the output branches."""
        edges = [(level, level) for level in self.schedule[0]]
        for stage in range(1, self.num_stages + 1):
            for level in self.schedule[stage]:
                edges.append((level + 1, level))
                edges.append((level, level))
                if level > 1:
                    edges.append((level - 1, level))
        for scale in range(self.cfg.num_output_scales):
            edges.append((scale + 1, scale))
        return edges

    def forward(self, encoder_features):
        if len(encoder_features) != self.cfg.num_levels:
            raise ValueError(
                f"expected {self.cfg.num_levels} encoder features, got {len(encoder_features)}"
            )
        grid = {}
        for level, (extract, feature) in enumerate(zip(self.extracts, encoder_features), start=1):
            grid[(level, 0)] = extract(feature)

        for stage in range(1, self.num_stages + 1):
            for level in self.schedule[stage]:
                node = self.nodes[f"l{level}s{stage}"]
                grid[(level, stage)] = node(
                    grid[(level + 1, stage - 1)],
                    grid[(level, stage - 1)],
                    grid[(level - 1, stage - 1)] if level > 1 else None,
                )

        disparities = []
        for scale, branch in enumerate(self.branches):
            level = scale + 1
            disparities.append(branch(grid[(level, self.final_stage(level))]))
        return disparities
