"""Relative-pose regression from a pair of frames."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class PoseNetConfig:
    widths: tuple = (16, 32, 64, 128, 256)

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")


def tiny_pose_config() -> PoseNetConfig:
    return PoseNetConfig(widths=(8, 16, 32, 64))


class PoseNet(nn.Module):
    """Channel-concatenated frame pair -> strided conv stack -> global
    average pool -> 6-DOF vector (axis-angle then translation).

    No symmetry is imposed: swapping the input frames generally changes the
    output, which is what lets the net learn directed motion.
    """

    def __init__(self, cfg: PoseNetConfig = PoseNetConfig()):
        super().__init__()
        layers = []
        in_ch = 6
        for width in cfg.widths:
            layers += [
                nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
            ]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, 6, 1)
        # start near the identity pose: large random rotations at step 0
        # would throw most projections off-image and starve the loss
        with torch.no_grad():
            self.head.weight.mul_(0.01)
            self.head.bias.zero_()

    def forward(self, frame_a: torch.Tensor, frame_b: torch.Tensor) -> torch.Tensor:
        if frame_a.shape != frame_b.shape:
            raise ValueError(
                f"frame shapes differ: {tuple(frame_a.shape)} vs {tuple(frame_b.shape)}"
            )
        squeeze = False
        if frame_a.ndim == 3:
            frame_a, frame_b = frame_a.unsqueeze(0), frame_b.unsqueeze(0)
            squeeze = True
        x = self.head(self.features(torch.cat([frame_a, frame_b], dim=1)))
        vec = x.mean(dim=(2, 3))
        return vec.squeeze(0) if squeeze else vec
