"""Depth metrics and model complexity accounting.

Metrics follow the standard monocular protocol: optional median scaling,
depth cap, border crop, seven error/accuracy numbers. Complexity is counted
as exact trainable scalars and as multiply-accumulates (MACs) from a hooked
forward pass.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .networks import ChannelAttention
from .networks.encoders import MBConv, SqueezeExcite

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")

# fractional Garg/Eigen evaluation crop (rows then cols)
_EIGEN_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_tuple(self):
        return tuple(getattr(self, name) for name in METRIC_NAMES)

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class EvalProtocol:
    median_scaling: bool = True
    min_depth: float = 1e-3
    cap: float = 80.0
    crop: str = "eigen"

    def __post_init__(self):
        if self.crop not in ("eigen", "none"):
            raise ValueError(f"crop must be 'eigen' or 'none', got {self.crop!r}")
        if not 0 < self.min_depth < self.cap:
            raise ValueError("need 0 < min_depth < cap")


def _valid_mask(gt: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    mask = (gt > protocol.min_depth) & (gt < protocol.cap)
    if protocol.crop == "eigen":
        h, w = gt.shape
        top, bottom, left, right = (
            int(_EIGEN_CROP[0] * h),
            int(_EIGEN_CROP[1] * h),
            int(_EIGEN_CROP[2] * w),
            int(_EIGEN_CROP[3] * w),
        )
        crop = np.zeros_like(mask)
        crop[top:bottom, left:right] = True
        mask &= crop
    return mask


def compute_metrics(
    pred: np.ndarray, gt: np.ndarray, protocol: EvalProtocol = EvalProtocol()
) -> DepthMetrics:
    """Seven-number depth evaluation over the valid ground-truth pixels.

    Missing ground truth is encoded as 0 and excluded by the min_depth
    bound. With median_scaling the prediction is rescaled by
    median(gt)/median(pred) before clamping to [min_depth, cap].
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")

    mask = _valid_mask(gt, protocol)
    if not mask.any():
        raise ValueError("no valid ground-truth pixels after crop and depth bounds")

    pred = pred[mask]
    gt = gt[mask]

    if protocol.median_scaling:
        pred_median = np.median(pred)
        if pred_median <= 0:
            raise ValueError("median scaling needs a positive prediction median")
        pred = pred * (np.median(gt) / pred_median)

    pred = np.clip(pred, protocol.min_depth, protocol.cap)

    ratio = np.maximum(gt / pred, pred / gt)
    diff = pred - gt
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def average_metrics(per_frame: list[DepthMetrics]) -> DepthMetrics:
    """Uniform mean over frames."""
    if not per_frame:
        raise ValueError("no frames to average")
    stacked = np.array([m.as_tuple() for m in per_frame])
    return DepthMetrics(*(float(v) for v in stacked.mean(axis=0)))


# ------------------------------------------------------------ complexity ----


@dataclass
class ComplexityReport:
    """Parameter and MAC totals with a per-submodule breakdown; the totals
    always equal the sum of their breakdowns."""

    total_params: int = 0
    params_by_module: dict = field(default_factory=dict)
    total_macs: int = 0
    macs_by_module: dict = field(default_factory=dict)
    input_shape: tuple | None = None

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    @property
    def params_m(self) -> float:
        return self.total_params / 1e6

    def to_json(self) -> str:
        data = asdict(self)
        data["input_shape"] = list(self.input_shape) if self.input_shape else None
        return json.dumps(data, indent=2, sort_keys=True)


def _group(qualified_name: str) -> str:
    return qualified_name.split(".", 1)[0] if qualified_name else "<root>"


def count_parameters(model: nn.Module, trainable_only: bool = False) -> ComplexityReport:
    """Exact parameter count with a per-top-level-submodule breakdown."""
    report = ComplexityReport()
    for name, parameter in model.named_parameters():
        if trainable_only and not parameter.requires_grad:
            continue
        group = _group(name)
        report.params_by_module[group] = report.params_by_module.get(group, 0) + parameter.numel()
        report.total_params += parameter.numel()
    return report


def _conv_macs(module: nn.Conv2d, output: torch.Tensor) -> int:
    kh, kw = module.kernel_size
    h_out, w_out = output.shape[-2:]
    return (
        kh * kw * module.in_channels * module.out_channels * h_out * w_out
        // module.groups
        * output.shape[0]
    )


def _macs_of(module: nn.Module, output) -> int | None:
    """MACs contributed by this module itself (children are hooked
    separately): the conv product formula for convolutions, one MAC per
    output scalar for elementwise/normalization/pooling/resampling work,
    and the gating or skip arithmetic of the attention blocks."""
    if isinstance(module, nn.Conv2d):
        return _conv_macs(module, output)
    if isinstance(module, nn.Linear):
        return module.in_features * module.out_features * output.shape[0]
    if isinstance(
        module,
        (
            nn.BatchNorm2d,
            nn.ELU,
            nn.ReLU,
            nn.SiLU,
            nn.Sigmoid,
            nn.Upsample,
            nn.AvgPool2d,
            nn.AdaptiveAvgPool2d,
            nn.MaxPool2d,
        ),
    ):
        return output.numel()
    if isinstance(module, (ChannelAttention, SqueezeExcite)):
        return output.numel()  # the per-channel gate multiply
    if isinstance(module, MBConv):
        return output.numel() if module.use_skip else 0
    return None


def estimate_flops(
    model: nn.Module,
    input_shape: tuple,
    batch_size: int = 1,
    count_two_ops_per_mac: bool = False,
) -> ComplexityReport:
    """Run one forward pass with counting hooks and sum per-layer MACs.

    input_shape is (C, H, W). Set count_two_ops_per_mac to report FLOPs as
    2x MACs for comparison with papers that count multiply and add
    separately.
    """
    report = ComplexityReport(input_shape=tuple(input_shape))
    handles = []

    def make_hook(qname):
        def hook(module, inputs, output):
            if not isinstance(output, torch.Tensor):
                return
            macs = _macs_of(module, output)
            if macs:
                group = _group(qname)
                report.macs_by_module[group] = report.macs_by_module.get(group, 0) + macs
                report.total_macs += macs

        return hook

    for qname, module in model.named_modules():
        handles.append(module.register_forward_hook(make_hook(qname)))

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(batch_size, *input_shape))
    finally:
        for handle in handles:
            handle.remove()
        if was_training:
            model.train()

    if count_two_ops_per_mac:
        report.total_macs *= 2
        report.macs_by_module = {k: v * 2 for k, v in report.macs_by_module.items()}
    return report


def complexity_report(model: nn.Module, input_shape: tuple, **kwargs) -> ComplexityReport:
    """Parameters and MACs in a single report."""
    params = count_parameters(model)
    macs = estimate_flops(model, input_shape, **kwargs)
    macs.total_params = params.total_params
    macs.params_by_module = params.params_by_module
    return macs


def write_metrics_csv(path, rows: list[tuple[str, DepthMetrics]]):
    """Per-frame CSV: frame id followed by the seven metric columns."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("frame_id",) + tuple(METRIC_NAMES))
        for frame_id, metrics in rows:
            writer.writerow((frame_id,) + tuple(f"{v:.8f}" for v in metrics.as_tuple()))


# ------------------------------------------------------------- inference ----


def predict_depth(state, image: torch.Tensor) -> np.ndarray:
    """Finest-scale depth for one (3, H, W) image, in meters."""
    from .training import disp_to_depth  # local import to avoid a cycle

    state.depth_net.eval()
    with torch.no_grad():
        disparities = state.depth_net(image.unsqueeze(0))
        disp = disparities[0].clamp(1e-6, 1 - 1e-6)
        depth = disp_to_depth(disp, state.train_cfg.min_depth, state.train_cfg.max_depth)
    return depth[0, 0].numpy()


def _resize_to(pred: np.ndarray, shape) -> np.ndarray:
    if pred.shape == tuple(shape):
        return pred
    tensor = torch.from_numpy(pred)[None, None]
    resized = torch.nn.functional.interpolate(
        tensor, size=tuple(shape), mode="bilinear", align_corners=False
    )
    return resized[0, 0].numpy()


def evaluate_checkpoint(
    checkpoint_path,
    eval_items,
    protocol: EvalProtocol = EvalProtocol(),
    per_frame_csv=None,
):
    """Aggregate metrics for a checkpoint over (frame_id, image, gt) items.

    Frames without ground truth are skipped with a warning and listed in
    the returned summary. Predictions are resized to the ground-truth
    resolution before scoring.
    """
    import warnings

    from .training import load_state

    state = load_state(checkpoint_path)
    rows = []
    skipped = []
    for frame_id, image, gt in eval_items:
        if gt is None:
            warnings.warn(f"no ground truth for {frame_id}; skipped")
            skipped.append(frame_id)
            continue
        pred = _resize_to(predict_depth(state, image), gt.shape)
        rows.append((frame_id, compute_metrics(pred, gt, protocol)))
    if not rows:
        raise ValueError("no frames with ground truth to evaluate")
    if per_frame_csv is not None:
        write_metrics_csv(per_frame_csv, rows)
    return average_metrics([m for _, m in rows]), rows, skipped


def evaluate_predictions(
    pred_lookup,
    eval_items,
    protocol: EvalProtocol = EvalProtocol(),
    per_frame_csv=None,
):
    """Like evaluate_checkpoint, but scores precomputed depth rasters.
    pred_lookup maps a frame id to a depth array or None."""
    import warnings

    rows = []
    skipped = []
    for frame_id, _, gt in eval_items:
        pred = pred_lookup(frame_id)
        if gt is None or pred is None:
            warnings.warn(f"missing prediction or ground truth for {frame_id}; skipped")
            skipped.append(frame_id)
            continue
        rows.append((frame_id, compute_metrics(_resize_to(pred, gt.shape), gt, protocol)))
    if not rows:
        raise ValueError("no frames could be evaluated")
    if per_frame_csv is not None:
        write_metrics_csv(per_frame_csv, rows)
    return average_metrics([m for _, m in rows]), rows, skipped
