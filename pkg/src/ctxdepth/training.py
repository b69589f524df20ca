"""Joint DepthNet + PoseNet training against the view-synthesis objective.

One step: predict disparities for the center frame, upsample each scale to
full resolution, convert to depth, regress the pose to each neighbor, warp
the neighbors into the center view, take the per-pixel minimum photometric
error over neighbors, add edge-aware smoothness per scale, average the four
scale losses, and apply one Adam update.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .data import FrameTriplet
from .geometry import Intrinsics, pose_from_6dof, synthesize_view
from .losses import (
    LossConfig,
    edge_aware_smoothness,
    masked_mean,
    min_reprojection,
    photometric_error,
    total_loss,
)
from .networks import (
    DecoderConfig,
    DepthNet,
    EncoderConfig,
    PoseNet,
    PoseNetConfig,
    build_depth_net,
    halved,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, step, diagnostics=None, snapshot_path=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}
        self.snapshot_path = snapshot_path


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_drop_epoch: int = 35
    lr_final: float = 1e-5
    adam_betas: tuple = (0.9, 0.999)
    num_scales: int = 4
    min_depth: float = 0.1
    max_depth: float = 100.0
    seed: int = 0
    pose_translation_scale: float = 0.01
    # upsample disparities to input resolution before warping (the baseline
    # lineage's multi-scale); False computes each scale natively
    upsample_disparities: bool = True
    # weight the smoothness of scale s by beta / 2^s instead of flat beta
    smooth_decay_per_scale: bool = True

    def __post_init__(self):
        if self.lr_drop_epoch > self.epochs:
            raise ValueError("lr_drop_epoch must be <= epochs")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.num_scales < 1:
            raise ValueError("need at least one scale")


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Two-phase schedule: the initial rate for the first lr_drop_epoch
    epochs, the fine-tuning rate afterwards (epochs counted from 0)."""
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_final


def disp_to_depth(disp: torch.Tensor, min_depth: float, max_depth: float) -> torch.Tensor:
    """Map sigmoid disparity in (0, 1) to metric depth in [min, max].

    depth = 1 / (b + (a - b) * disp) with a = 1/min_depth, b = 1/max_depth;
    monotone decreasing, disp -> 1 gives min_depth, disp -> 0 gives
    max_depth.
    """
    if (disp <= 0).any() or (disp >= 1).any():
        raise ValueError("disparity must lie strictly inside (0, 1)")
    a = 1.0 / min_depth
    b = 1.0 / max_depth
    return 1.0 / (b + (a - b) * disp)


@dataclass
class TrainState:
    depth_net: DepthNet
    pose_net: PoseNet
    optimizer: torch.optim.Adam
    train_cfg: TrainConfig
    loss_cfg: LossConfig
    encoder_cfg: EncoderConfig
    decoder_cfg: DecoderConfig
    pose_cfg: PoseNetConfig
    step: int = 0
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    def parameters(self):
        return list(self.depth_net.parameters()) + list(self.pose_net.parameters())


def initialize_state(
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    encoder_cfg: EncoderConfig = EncoderConfig(),
    decoder_cfg: DecoderConfig | None = None,
    pose_cfg: PoseNetConfig = PoseNetConfig(),
) -> TrainState:
    """Seeded construction of both networks and the optimizer."""
    torch.manual_seed(train_cfg.seed)
    np.random.seed(train_cfg.seed)
    if decoder_cfg is None:
        decoder_cfg = halved(DecoderConfig()) if encoder_cfg.kind == "tiny" else DecoderConfig()
    depth_net = DepthNet(encoder_cfg, decoder_cfg)
    pose_net = PoseNet(pose_cfg)
    optimizer = torch.optim.Adam(
        list(depth_net.parameters()) + list(pose_net.parameters()),
        lr=train_cfg.lr_initial,
        betas=train_cfg.adam_betas,
    )
    return TrainState(
        depth_net=depth_net,
        pose_net=pose_net,
        optimizer=optimizer,
        train_cfg=train_cfg,
        loss_cfg=loss_cfg,
        encoder_cfg=encoder_cfg,
        decoder_cfg=decoder_cfg,
        pose_cfg=pose_cfg,
    )


@dataclass
class Batch:
    prev: torch.Tensor
    center: torch.Tensor
    next: torch.Tensor
    aug_prev: torch.Tensor
    aug_center: torch.Tensor
    aug_next: torch.Tensor
    intrinsics: Intrinsics


def collate(triplets: list[FrameTriplet]) -> Batch:
    if not triplets:
        raise ValueError("empty batch")
    k = triplets[0].intrinsics
    if any(t.intrinsics != k for t in triplets):
        raise ValueError("all triplets in a batch must share intrinsics")
    aug = [t.network_inputs() for t in triplets]
    return Batch(
        prev=torch.stack([t.prev for t in triplets]),
        center=torch.stack([t.center for t in triplets]),
        next=torch.stack([t.next for t in triplets]),
        aug_prev=torch.stack([a[0] for a in aug]),
        aug_center=torch.stack([a[1] for a in aug]),
        aug_next=torch.stack([a[2] for a in aug]),
        intrinsics=k,
    )


def _predict_poses(state: TrainState, batch: Batch):
    """Center-to-neighbor transforms with the translation damped for early
    stability."""
    cfg = state.train_cfg
    poses = []
    for source in (batch.aug_prev, batch.aug_next):
        vec = state.pose_net(batch.aug_center, source)
        scaled = torch.cat(
            [vec[:, :3], vec[:, 3:] * cfg.pose_translation_scale], dim=1
        )
        poses.append(pose_from_6dof(scaled))
    return poses


def compute_batch_loss(state: TrainState, batch: Batch):
    """The multi-scale objective for one batch; returns (loss, detail)."""
    cfg = state.train_cfg
    loss_cfg = state.loss_cfg
    full_h, full_w = batch.center.shape[-2:]

    disparities = state.depth_net(batch.aug_center)[: cfg.num_scales]
    poses = _predict_poses(state, batch)
    sources = (batch.prev, batch.next)

    scale_losses, photo_values, smooth_values = [], [], []
    for scale, disp in enumerate(disparities):
        disp = disp.clamp(1e-6, 1.0 - 1e-6)  # sigmoid can saturate in fp32

        if cfg.upsample_disparities:
            disp_full = (
                disp
                if disp.shape[-2:] == (full_h, full_w)
                else F.interpolate(disp, (full_h, full_w), mode="bilinear", align_corners=False)
            )
            depth = disp_to_depth(disp_full.squeeze(1), cfg.min_depth, cfg.max_depth)
            k = batch.intrinsics
            target = batch.center
            warp_sources = sources
        else:
            factor = disp.shape[-1] / full_w
            depth = disp_to_depth(disp.squeeze(1), cfg.min_depth, cfg.max_depth)
            k = batch.intrinsics.scaled(factor)
            pool = int(round(1 / factor))
            target = F.avg_pool2d(batch.center, pool) if pool > 1 else batch.center
            warp_sources = tuple(
                F.avg_pool2d(s, pool) if pool > 1 else s for s in sources
            )

        errors, masks = [], []
        for source, pose in zip(warp_sources, poses):
            synthesized, valid = synthesize_view(source, depth, pose, k)
            errors.append(photometric_error(target, synthesized, loss_cfg))
            masks.append(valid)

        if loss_cfg.auto_mask:
            for source in warp_sources:
                identity = photometric_error(target, source, loss_cfg)
                identity = identity + torch.randn_like(identity) * 1e-5  # break ties
                errors.append(identity)
                masks.append(torch.ones_like(identity, dtype=torch.bool))

        merged = min_reprojection(errors, masks)
        photometric = masked_mean(merged.error, merged.valid)

        scale_factor = disp.shape[-1] / full_w
        smooth_image = (
            batch.center
            if scale_factor == 1.0
            else F.avg_pool2d(batch.center, int(round(1 / scale_factor)))
        )
        smoothness = edge_aware_smoothness(disp.squeeze(1), smooth_image)

        smooth_cfg = loss_cfg
        if cfg.smooth_decay_per_scale and scale > 0:
            smooth_cfg = LossConfig(
                alpha=loss_cfg.alpha,
                lambda_re=loss_cfg.lambda_re,
                beta_smooth=loss_cfg.beta_smooth / 2 ** scale,
                ssim_window=loss_cfg.ssim_window,
                ssim_c1=loss_cfg.ssim_c1,
                ssim_c2=loss_cfg.ssim_c2,
                auto_mask=loss_cfg.auto_mask,
            )
        scale_losses.append(total_loss(photometric, smoothness, smooth_cfg))
        photo_values.append(photometric.item())
        smooth_values.append(smoothness.item())

    loss = torch.stack(scale_losses).mean()
    detail = {
        "total": loss.item(),
        "photometric": float(np.mean(photo_values)),
        "smoothness": float(np.mean(smooth_values)),
    }
    return loss, detail


def train_step(batch: Batch, state: TrainState) -> dict:
    """One optimization step; raises TrainingDiverged on a non-finite loss."""
    state.depth_net.train()
    state.pose_net.train()
    loss, detail = compute_batch_loss(state, batch)
    if not math.isfinite(detail["total"]):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}", step=state.step, diagnostics=detail
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(detail["total"])
    return detail


# ------------------------------------------------------------ persistence ----


def _config_manifest(state: TrainState) -> dict:
    return {
        "step": state.step,
        "epoch": state.epoch,
        "train_cfg": asdict(state.train_cfg),
        "loss_cfg": asdict(state.loss_cfg),
        "encoder_cfg": asdict(state.encoder_cfg),
        "decoder_cfg": asdict(state.decoder_cfg),
        "pose_cfg": asdict(state.pose_cfg),
    }


def save_state(state: TrainState, path) -> Path:
    arrays = {}
    arrays.update(ckpt.module_arrays(state.depth_net, "depth"))
    arrays.update(ckpt.module_arrays(state.pose_net, "pose"))
    optim_state = state.optimizer.state_dict()
    for param_index, slots in optim_state["state"].items():
        for slot, value in slots.items():
            arrays[f"optim.{param_index}.{slot}"] = (
                value if isinstance(value, torch.Tensor) else torch.tensor(value)
            )
    manifest = _config_manifest(state)
    manifest["optim_param_groups"] = [
        {k: v for k, v in group.items() if k != "params"}
        for group in optim_state["param_groups"]
    ]
    manifest["optim_group_params"] = [group["params"] for group in optim_state["param_groups"]]
    return ckpt.save_archive(path, arrays, manifest)


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_state(path) -> TrainState:
    arrays, manifest = ckpt.load_archive(path)
    state = initialize_state(
        train_cfg=TrainConfig(**_tuplify(manifest["train_cfg"])),
        loss_cfg=LossConfig(**manifest["loss_cfg"]),
        encoder_cfg=EncoderConfig(**manifest["encoder_cfg"]),
        decoder_cfg=DecoderConfig(**_tuplify(manifest["decoder_cfg"])),
        pose_cfg=PoseNetConfig(**_tuplify(manifest["pose_cfg"])),
    )
    ckpt.load_module_arrays(state.depth_net, arrays, "depth")
    ckpt.load_module_arrays(state.pose_net, arrays, "pose")

    optim_slots = {}
    for name, value in arrays.items():
        if not name.startswith("optim."):
            continue
        _, param_index, slot = name.split(".", 2)
        optim_slots.setdefault(int(param_index), {})[slot] = torch.from_numpy(np.array(value))
    groups = []
    for group_cfg, params in zip(manifest["optim_param_groups"], manifest["optim_group_params"]):
        group = dict(group_cfg)
        group["betas"] = tuple(group["betas"])
        group["params"] = params
        groups.append(group)
    state.optimizer.load_state_dict({"state": optim_slots, "param_groups": groups})
    state.step = manifest["step"]
    state.epoch = manifest["epoch"]
    return state


# ------------------------------------------------------------------- fit ----


def _epoch_batches(dataset, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield [dataset[int(i)] for i in order[start : start + batch_size]]


def fit(
    dataset,
    state: TrainState,
    run_dir,
    max_steps: int | None = None,
    log_hook=None,
) -> TrainState:
    """Run the configured epochs (or max_steps), logging and checkpointing.

    Writes metrics.csv (step, epoch, lr, total_loss, photometric,
    smoothness) and a checkpoint per epoch plus last.ckpt. Epoch data order
    derives from (seed, epoch), so a resumed run replays the exact same
    batches. On divergence a diagnostic snapshot is saved and
    TrainingDiverged re-raised with its path.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = state.train_cfg
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    log_path = run_dir / "metrics.csv"
    new_log = not log_path.exists()
    log_file = log_path.open("a", newline="")
    logger = csv.writer(log_file)
    if new_log:
        logger.writerow(["step", "epoch", "lr", "total_loss", "photometric", "smoothness"])

    steps_done = 0
    try:
        for epoch in range(state.epoch, cfg.epochs):
            lr = lr_for_epoch(cfg, epoch)
            for group in state.optimizer.param_groups:
                group["lr"] = lr

            rng = np.random.default_rng((cfg.seed, epoch))
            for triplets in _epoch_batches(dataset, cfg.batch_size, rng):
                batch = collate(triplets)
                try:
                    detail = train_step(batch, state)
                except TrainingDiverged as diverged:
                    snapshot = run_dir / f"diverged_step_{state.step}.ckpt"
                    save_state(state, snapshot)
                    (run_dir / "diverged.json").write_text(
                        json.dumps({"step": state.step, "diagnostics": diverged.diagnostics})
                    )
                    diverged.snapshot_path = snapshot
                    raise
                logger.writerow(
                    [
                        state.step,
                        epoch,
                        f"{lr:.6e}",
                        f"{detail['total']:.10e}",
                        f"{detail['photometric']:.10e}",
                        f"{detail['smoothness']:.10e}",
                    ]
                )
                if log_hook is not None:
                    log_hook(state.step, detail)
                steps_done += 1
                if max_steps is not None and steps_done >= max_steps:
                    state.epoch = epoch
                    save_state(state, run_dir / "last.ckpt")
                    return state

            state.epoch = epoch + 1
            save_state(state, run_dir / f"checkpoint_epoch_{epoch + 1:03d}.ckpt")
            save_state(state, run_dir / "last.ckpt")
    finally:
        log_file.close()
    return state
