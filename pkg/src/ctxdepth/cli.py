"""Batch operator surface: train, infer, eval, synth, complexity.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(a diverged run leaves a diagnostic snapshot whose path is printed).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config, snapshot_config
from .data import (
    KittiDataset,
    KittiReader,
    SyntheticDiskDataset,
    SyntheticSceneSpec,
    gt_warp_residual,
    generate_synthetic_scene,
    kitti_eval_items,
    load_split,
    read_depth,
    read_image,
    safe_frame_name,
    write_depth_f32,
    write_synthetic_dataset,
)
from .evaluation import (
    METRIC_NAMES,
    EvalProtocol,
    complexity_report,
    evaluate_checkpoint,
    evaluate_predictions,
    predict_depth,
)
from .training import TrainingDiverged, fit, initialize_state, load_state

ENCODER_ALIASES = {
    "tiny": "tiny",
    "b0": "efficientnet-b0-shape",
    "b1": "efficientnet-b1-shape",
    "efficientnet-b0-shape": "efficientnet-b0-shape",
    "efficientnet-b1-shape": "efficientnet-b1-shape",
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed)


def _build_dataset(cfg: ExperimentConfig):
    data = cfg.data
    if not data.path:
        raise ConfigError("data.path is required")
    if data.kind == "synthetic":
        return SyntheticDiskDataset(data.path)
    reader = KittiReader(data.path, width=data.width, height=data.height)
    manifest = load_split(data.split) if data.split else None
    if manifest is None or not manifest.train:
        raise ConfigError("kitti training needs data.split with a train list")
    return KittiDataset(reader, list(manifest.train), augment=data.augment, seed=cfg.train.seed)


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    run_dir = Path(args.out or cfg.output_dir)

    try:
        dataset = _build_dataset(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    snapshot_config(cfg, run_dir)
    state = initialize_state(
        train_cfg=cfg.train,
        loss_cfg=cfg.loss,
        encoder_cfg=cfg.encoder,
        decoder_cfg=cfg.decoder,
        pose_cfg=cfg.pose,
    )

    def progress(step, detail):
        if step % args.log_every == 0:
            print(
                f"step {step:6d}  loss {detail['total']:.6f}  "
                f"photometric {detail['photometric']:.6f}"
            )

    try:
        fit(dataset, state, run_dir, max_steps=args.max_steps, log_hook=progress)
    except TrainingDiverged as diverged:
        print(
            f"error: training diverged at step {diverged.step}; "
            f"diagnostic snapshot: {diverged.snapshot_path}",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSceneSpec.from_json(args.spec)
        if args.seed is not None:
            spec = SyntheticSceneSpec(**{**spec.__dict__, "texture_seed": args.seed})
        scene_dirs = write_synthetic_dataset(spec, args.out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # self-check: the photometric-zero oracle on the generated geometry
    residual = max(
        gt_warp_residual(generate_synthetic_scene(spec, index))
        for index in range(spec.scenes)
    )
    print(f"wrote {len(scene_dirs)} scenes to {args.out}")
    print(f"self-check: worst ground-truth warp residual {residual:.3e}")
    if spec.baseline == 0.0:
        print("self-check: baseline is 0, the three frames are identical")
    return EXIT_OK


def _infer_one(state, path: Path, out_dir: Path, preview: bool) -> Path:
    image = read_image(path)
    h, w = image.shape[-2:]
    divisor = state.depth_net.divisor
    if h % divisor or w % divisor:
        new_h, new_w = max(divisor, h // divisor * divisor), max(divisor, w // divisor * divisor)
        warnings.warn(f"{path.name}: {w}x{h} not divisible by {divisor}, resizing to {new_w}x{new_h}")
        image = read_image(path, (new_w, new_h))
    depth = predict_depth(state, image)
    out_base = out_dir / f"{path.stem}.f32"
    write_depth_f32(out_base, depth)
    if preview:
        _write_preview(out_dir / f"{path.stem}_preview.png", depth)
    return out_base


def _write_preview(path, depth: np.ndarray):
    """Disparity rendered with the fixed magma colormap, normalized to the
    95th percentile (near = bright)."""
    import matplotlib.cm as cm

    disparity = 1.0 / np.maximum(depth, 1e-6)
    ceiling = np.percentile(disparity, 95)
    normalized = np.clip(disparity / max(ceiling, 1e-12), 0, 1)
    rgba = (cm.magma(normalized) * 255).astype(np.uint8)
    from PIL import Image

    Image.fromarray(rgba[..., :3]).save(path)


def cmd_infer(args) -> int:
    try:
        state = load_state(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    source = Path(args.input)
    images = (
        sorted(p for p in source.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if source.is_dir()
        else [source]
    )
    if not images:
        print(f"error: no images under {source}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = 0
    for path in images:
        try:
            out = _infer_one(state, path, out_dir, args.preview)
        except OSError as exc:
            warnings.warn(f"skipping {path}: {exc}")
            continue
        print(f"{path.name} -> {out}")
        written += 1
    if written == 0:
        print("error: every input failed to decode", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _protocol_from_args(args) -> EvalProtocol:
    return EvalProtocol(
        median_scaling=not args.no_median_scaling,
        min_depth=args.min_depth,
        cap=args.cap,
        crop=args.crop,
    )


def _eval_items(args):
    if args.data_kind == "synthetic":
        return list(SyntheticDiskDataset(args.data).eval_items())
    reader = KittiReader(args.data, width=args.width, height=args.height)
    manifest = load_split(args.split)
    frame_ids = list(manifest.test or manifest.train)
    return list(kitti_eval_items(reader, frame_ids, args.gt_dir or None))


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        print("error: pass exactly one of --checkpoint or --predictions", file=sys.stderr)
        return EXIT_CONFIG
    protocol = _protocol_from_args(args)
    try:
        items = _eval_items(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out_dir) if args.out_dir else None
    per_frame_csv = out_dir / "per_frame.csv" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    try:
        if args.checkpoint:
            aggregate, rows, skipped = evaluate_checkpoint(
                args.checkpoint, items, protocol, per_frame_csv
            )
        else:
            pred_dir = Path(args.predictions)

            def lookup(frame_id):
                for suffix in (".f32", ".png"):
                    candidate = pred_dir / f"{safe_frame_name(frame_id)}{suffix}"
                    if candidate.exists():
                        return read_depth(candidate)
                return None

            aggregate, rows, skipped = evaluate_predictions(lookup, items, protocol, per_frame_csv)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    header = "  ".join(f"{name:>8}" for name in METRIC_NAMES)
    values = "  ".join(f"{v:8.3f}" for v in aggregate.as_tuple())
    extra_header = extra_values = ""
    if args.report_complexity and args.checkpoint:
        state = load_state(args.checkpoint)
        report = complexity_report(state.depth_net, (3, args.height, args.width))
        extra_header = f"  {'gmacs':>8}  {'params_m':>8}"
        extra_values = f"  {report.gmacs:8.3f}  {report.params_m:8.3f}"
    print(header + extra_header)
    print(values + extra_values)
    if skipped:
        print(f"skipped {len(skipped)} frames without ground truth")

    if out_dir:
        summary = {
            "metrics": aggregate.as_dict(),
            "protocol": {
                "median_scaling": protocol.median_scaling,
                "min_depth": protocol.min_depth,
                "cap": protocol.cap,
                "crop": protocol.crop,
            },
            "frames_evaluated": len(rows),
            "frames_skipped": skipped,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))

    if len(skipped) > len(rows):
        print("error: more than half of the frames were skipped", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_complexity(args) -> int:
    from .networks import EncoderConfig, build_depth_net

    kind = ENCODER_ALIASES.get(args.encoder)
    if kind is None:
        print(f"error: unknown encoder {args.encoder!r}", file=sys.stderr)
        return EXIT_CONFIG
    net = build_depth_net(EncoderConfig(kind))
    report = complexity_report(
        net, (3, args.height, args.width), count_two_ops_per_mac=args.double_count
    )
    unit = "GFLOPs(2/MAC)" if args.double_count else "GMACs"
    print(f"encoder: {kind}")
    print(f"input:   {args.width}x{args.height}")
    print(f"params:  {report.params_m:.3f} M")
    print(f"compute: {report.gmacs:.3f} {unit}")
    for module in sorted(report.macs_by_module):
        params = report.params_by_module.get(module, 0)
        print(
            f"  {module:<10} {params / 1e6:7.3f} M params  "
            f"{report.macs_by_module[module] / 1e9:7.3f} {unit}"
        )
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxdepth",
        description="Self-supervised monocular depth: training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train depth and pose networks")
    train.add_argument("--config", required=True, help="experiment config JSON")
    train.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    train.add_argument("--out", help="run directory (defaults to config output_dir)")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--max-steps", type=int, help="stop after this many steps")
    train.add_argument("--log-every", type=int, default=10)
    train.set_defaults(func=cmd_train)

    synth = sub.add_parser("synth", help="write a synthetic plane dataset")
    synth.add_argument("--spec", required=True, help="scene spec JSON")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--seed", type=int, help="override the texture seed")
    synth.set_defaults(func=cmd_synth)

    infer = sub.add_parser("infer", help="predict depth for images")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--input", required=True, help="image file or directory")
    infer.add_argument("--out", required=True, help="output directory")
    infer.add_argument("--preview", action="store_true", help="also write colorized PNGs")
    infer.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    infer.set_defaults(func=cmd_infer)

    evaluate = sub.add_parser("eval", help="compute depth metrics")
    evaluate.add_argument("--checkpoint", help="checkpoint to evaluate")
    evaluate.add_argument("--predictions", help="directory of precomputed depth rasters")
    evaluate.add_argument("--data", required=True, help="dataset directory")
    evaluate.add_argument("--data-kind", choices=("synthetic", "kitti"), default="synthetic")
    evaluate.add_argument("--split", help="kitti split file or directory")
    evaluate.add_argument("--gt-dir", help="kitti ground-truth depth directory")
    evaluate.add_argument("--width", type=int, default=640)
    evaluate.add_argument("--height", type=int, default=192)
    evaluate.add_argument("--no-median-scaling", action="store_true")
    evaluate.add_argument("--min-depth", type=float, default=1e-3)
    evaluate.add_argument("--cap", type=float, default=80.0)
    evaluate.add_argument("--crop", choices=("eigen", "none"), default="eigen")
    evaluate.add_argument("--out-dir", help="write per_frame.csv and summary.json here")
    evaluate.add_argument("--report-complexity", action="store_true")
    evaluate.add_argument("--seed", type=int, help="accepted for uniformity")
    evaluate.set_defaults(func=cmd_eval)

    complexity = sub.add_parser("complexity", help="parameter and MAC accounting")
    complexity.add_argument("--encoder", default="b0", help="tiny | b0 | b1 | full kind name")
    complexity.add_argument("--width", type=int, default=640)
    complexity.add_argument("--height", type=int, default=192)
    complexity.add_argument("--double-count", action="store_true", help="report 2 ops per MAC")
    complexity.add_argument("--json", help="also write the report as JSON")
    complexity.set_defaults(func=cmd_complexity)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None:
        _seed_everything(args.seed)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
