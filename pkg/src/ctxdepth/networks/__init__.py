"""Depth and pose networks."""

from __future__ import annotations

import torch
import torch.nn as nn

from .blocks import ChannelAttention, ExtractBlock, SeparableConv2d
from .decoder import DecoderConfig, DisparityBranch, FusionDecoder, FusionNode, grid_schedule, halved
from .encoders import ENCODER_KINDS, EncoderConfig, build_encoder
from .pose import PoseNet, PoseNetConfig, tiny_pose_config

__all__ = [
    "ChannelAttention",
    "DecoderConfig",
    "DepthNet",
    "DisparityBranch",
    "ENCODER_KINDS",
    "EncoderConfig",
    "ExtractBlock",
    "FusionDecoder",
    "FusionNode",
    "PoseNet",
    "PoseNetConfig",
    "SeparableConv2d",
    "build_encoder",
    "build_depth_net",
    "grid_schedule",
    "halved",
    "tiny_pose_config",
]


class DepthNet(nn.Module):
    """Encoder pyramid -> fusion grid -> multi-scale sigmoid disparities.

    forward() returns a list of disparity maps ordered by scale: index s is
    at 1/2^s of the input resolution, values strictly in (0, 1).
    """

    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig):
        super().__init__()
        self.encoder = build_encoder(encoder_cfg)
        self.decoder = FusionDecoder(self.encoder.channels, decoder_cfg)
        self.divisor = 2 ** decoder_cfg.num_levels

    def forward(self, image: torch.Tensor):
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"input size {h}x{w} must be divisible by {self.divisor}")
        return self.decoder(self.encoder(image))


def build_depth_net(
    encoder_cfg: EncoderConfig | None = None,
    decoder_cfg: DecoderConfig | None = None,
) -> DepthNet:
    """Assemble a DepthNet; the tiny encoder automatically halves the
    decoder widths unless an explicit decoder config is given."""
    encoder_cfg = encoder_cfg or EncoderConfig()
    if decoder_cfg is None:
        decoder_cfg = DecoderConfig()
        if encoder_cfg.kind == "tiny":
            decoder_cfg = halved(decoder_cfg)
    return DepthNet(encoder_cfg, decoder_cfg)
