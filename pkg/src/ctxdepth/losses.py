"""The training objective: SSIM-weighted photometric error, per-pixel minimum
reprojection over source frames, edge-aware disparity smoothness, and their
weighted sum.

Images are (..., C, H, W) in [0, 1]; error maps are (..., H, W). Everything
is a pure function of its inputs and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants of the objective.

    alpha mixes SSIM against L1 inside the photometric error; lambda_re and
    beta_smooth weight the photometric and smoothness terms in the total.
    auto_mask enables the stationary-pixel masking of the baseline lineage
    (off by default: the plain per-pixel minimum is the published form).
    """

    alpha: float = 0.85
    lambda_re: float = 1.0
    beta_smooth: float = 1e-3
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    auto_mask: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_re < 0 or self.beta_smooth < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 1, got {self.ssim_window}")


class MinReprojection(NamedTuple):
    """Per-pixel minimum over source frames.

    error: the selected error, 0 where no source is valid;
    index: which source won at each pixel;
    valid: pixels valid in at least one source (only these belong in the
           final mean).
    """

    error: torch.Tensor
    index: torch.Tensor
    valid: torch.Tensor


def _flatten_for_pool(x: torch.Tensor):
    if x.ndim < 3:
        raise ValueError(f"expected (..., C, H, W), got {tuple(x.shape)}")
    return x.reshape(-1, *x.shape[-3:]), x.shape


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-pixel structural similarity over a uniform box window.

    Local moments come from a ssim_window box filter with reflection
    padding, so the output has the same shape as the inputs and lies in
    [-1, 1] (identical inputs give exactly 1).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    x, shape = _flatten_for_pool(a)
    y, _ = _flatten_for_pool(b)

    pad = cfg.ssim_window // 2
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        y = F.pad(y, (pad, pad, pad, pad), mode="reflect")

    def box(t):
        return F.avg_pool2d(t, cfg.ssim_window, stride=1)

    mu_x = box(x)
    mu_y = box(y)
    sigma_x = box(x * x) - mu_x * mu_x
    sigma_y = box(y * y) - mu_y * mu_y
    sigma_xy = box(x * y) - mu_x * mu_y

    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (numerator / denominator).reshape(shape)


def photometric_error(
    target: torch.Tensor, synthesized: torch.Tensor, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """SSIM/L1 mix between a frame and its synthesized counterpart.

    (alpha/2) * (1 - SSIM) + (1 - alpha) * |target - synthesized|, averaged
    over channels; (..., C, H, W) -> (..., H, W), nonnegative.
    """
    if target.shape != synthesized.shape:
        raise ValueError(
            f"shape mismatch: {tuple(target.shape)} vs {tuple(synthesized.shape)}"
        )
    l1 = (target - synthesized).abs()
    if cfg.alpha == 0.0:
        per_channel = l1
    else:
        dissim = 1.0 - ssim(target, synthesized, cfg)
        per_channel = (cfg.alpha / 2.0) * dissim + (1.0 - cfg.alpha) * l1
    return per_channel.mean(dim=-3)


def min_reprojection(
    errors: Sequence[torch.Tensor],
    validity: Sequence[torch.Tensor] | None = None,
) -> MinReprojection:
    """Take the per-pixel minimum error over source frames.

    Invalid pixels in a source are excluded from the minimum; a pixel
    invalid in every source comes back with error 0 and valid=False so the
    caller can drop it from the mean.
    """
    if len(errors) == 0:
        raise ValueError("need at least one error map")
    stacked = torch.stack(tuple(errors), dim=0)
    if validity is None:
        masks = torch.ones_like(stacked, dtype=torch.bool)
    else:
        if len(validity) != len(errors):
            raise ValueError("errors and validity lists differ in length")
        masks = torch.stack(tuple(validity), dim=0)
        if masks.shape != stacked.shape:
            raise ValueError("validity masks must match error map shapes")

    big = torch.finfo(stacked.dtype).max
    guarded = torch.where(masks, stacked, torch.full_like(stacked, big))
    error, index = guarded.min(dim=0)
    valid = masks.any(dim=0)
    return MinReprojection(torch.where(valid, error, torch.zeros_like(error)), index, valid)


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over mask-true entries; 0 if the mask is empty."""
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask.to(values.dtype)).sum() / count.to(values.dtype)


def edge_aware_smoothness(disp: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Disparity-gradient penalty attenuated at image edges.

    The disparity is mean-normalized first (so the penalty is invariant to
    positive rescaling and cannot be gamed by shrinking the output), then
    |d_x d*| * exp(-|d_x I|) + |d_y d*| * exp(-|d_y I|) with forward
    differences, image gradients averaged over channels, each term averaged
    over its difference grid. Returns a scalar.

    disp: (..., H, W); image: (..., C, H, W) with matching spatial size.
    """
    if disp.shape[-2:] != image.shape[-2:]:
        raise ValueError(
            f"disparity {tuple(disp.shape[-2:])} and image {tuple(image.shape[-2:])} differ"
        )
    mean = disp.mean(dim=(-2, -1), keepdim=True)
    if (mean == 0).any():
        raise ValueError("disparity with zero mean cannot be normalized")
    norm_disp = disp / mean

    grad_disp_x = (norm_disp[..., :, 1:] - norm_disp[..., :, :-1]).abs()
    grad_disp_y = (norm_disp[..., 1:, :] - norm_disp[..., :-1, :]).abs()
    grad_img_x = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=-3)
    grad_img_y = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=-3)

    term_x = grad_disp_x * torch.exp(-grad_img_x)
    term_y = grad_disp_y * torch.exp(-grad_img_y)
    return term_x.mean() + term_y.mean()


def total_loss(
    photometric: torch.Tensor | float,
    smoothness: torch.Tensor | float,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Weighted sum of the photometric and smoothness terms."""
    photometric = torch.as_tensor(photometric)
    smoothness = torch.as_tensor(smoothness)
    return cfg.lambda_re * photometric + cfg.beta_smooth * smoothness
