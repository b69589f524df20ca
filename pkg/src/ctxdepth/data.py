"""Data ingestion and synthetic oracle scenes.

Two sources feed the trainer: KITTI-style folder trees addressed by split
files (`<sequence> <frame_index> <side>` per line), and synthetic
fronto-parallel plane scenes with exact ground-truth depth and poses, used
as verification oracles.

On-disk formats:
    images       8-bit RGB PNG or JPEG
    GT depth     16-bit grayscale PNG, meters = value / 256, 0 = missing;
                 or float32 little-endian raster (.f32) + JSON sidecar
    split file   UTF-8 text, one frame identifier per line
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import Intrinsics, Pose, synthesize_view

# Shared normalized KITTI intrinsics of the baseline lineage: multiplied by
# the working resolution to get pixels. One K for all sequences.
KITTI_NORMALIZED_INTRINSICS = {"fx": 0.58, "fy": 1.92, "cx": 0.5, "cy": 0.5}

CANONICAL_SPLIT_COUNTS = {"train": 39810, "val": 4424, "test": 697}


class FrameUnavailable(LookupError):
    """A frame or one of its temporal neighbors is not on disk; the caller
    should skip this id rather than fail."""


@dataclass
class FrameTriplet:
    """Three consecutive frames plus calibration and optional ground truth.

    Images are (3, H, W) float32 in [0, 1]. Poses map target-frame points
    into the named source frame. aug_* carry the color-jittered copies fed
    to the networks; reconstruction targets stay clean.
    """

    prev: torch.Tensor
    center: torch.Tensor
    next: torch.Tensor
    intrinsics: Intrinsics
    gt_depth: torch.Tensor | None = None
    pose_to_prev: Pose | None = None
    pose_to_next: Pose | None = None
    aug_prev: torch.Tensor | None = None
    aug_center: torch.Tensor | None = None
    aug_next: torch.Tensor | None = None
    frame_id: str = ""

    def __post_init__(self):
        if not (self.prev.shape == self.center.shape == self.next.shape):
            raise ValueError("triplet frames must share one shape")

    def network_inputs(self):
        """(prev, center, next) as seen by the networks."""
        return (
            self.aug_prev if self.aug_prev is not None else self.prev,
            self.aug_center if self.aug_center is not None else self.center,
            self.aug_next if self.aug_next is not None else self.next,
        )


# ------------------------------------------------------- synthetic scenes ----


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """A textured fronto-parallel plane viewed from three cameras translated
    along x; by pinhole geometry the inter-frame pixel shift is
    focal * baseline / plane_depth."""

    plane_depth: float = 10.0
    focal: float = 100.0
    baseline: float = 0.5
    texture_seed: int = 0
    width: int = 64
    height: int = 64
    scenes: int = 1

    def __post_init__(self):
        if self.plane_depth <= 0:
            raise ValueError(f"plane depth must be positive, got {self.plane_depth}")
        if self.scenes < 1:
            raise ValueError("need at least one scene")

    @staticmethod
    def from_json(path) -> "SyntheticSceneSpec":
        with open(path) as fh:
            fields = json.load(fh)
        try:
            return SyntheticSceneSpec(**fields)
        except TypeError as exc:
            raise ValueError(f"bad synthetic spec {path}: {exc}") from None

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=(self.width - 1) / 2.0,
            cy=(self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )


class _SmoothTexture:
    """Band-limited RGB texture: a sum of low-frequency cosines, so bilinear
    resampling of rendered views stays within ~1e-3 of the true signal."""

    MAX_FREQUENCY = 0.02  # cycles per pixel
    COMPONENTS = 6

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        n = self.COMPONENTS
        self.freq = rng.uniform(-self.MAX_FREQUENCY, self.MAX_FREQUENCY, size=(3, n, 2))
        self.phase = rng.uniform(0, 2 * math.pi, size=(3, n))
        amp = rng.uniform(0.5, 1.0, size=(3, n))
        self.amp = 0.42 * amp / np.abs(amp).sum(axis=1, keepdims=True)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Evaluate at world coordinates; returns (3, *x.shape) in [0, 1]."""
        channels = []
        for c in range(3):
            arg = (
                2 * math.pi * (self.freq[c, :, 0, None, None] * x[None]
                               + self.freq[c, :, 1, None, None] * y[None])
                + self.phase[c, :, None, None]
            )
            channels.append(0.5 + (self.amp[c, :, None, None] * np.cos(arg)).sum(axis=0))
        return np.stack(channels)


def generate_synthetic_scene(spec: SyntheticSceneSpec, scene_index: int = 0) -> FrameTriplet:
    """Render one triplet with exact ground-truth depth and poses.

    Camera t sits at the world origin, t-1 at x=-baseline, t+1 at
    x=+baseline, all looking down +z at a plane z = plane_depth. The
    texture is evaluated analytically per view, so there is no rendering
    interpolation error at all.
    """
    texture = _SmoothTexture(spec.texture_seed + 1009 * scene_index)
    k = spec.intrinsics()
    us, vs = np.meshgrid(np.arange(spec.width), np.arange(spec.height))
    ray_x = (us - k.cx) / k.fx
    ray_y = (vs - k.cy) / k.fy

    def render(camera_x: float) -> torch.Tensor:
        world_x = ray_x * spec.plane_depth + camera_x
        world_y = ray_y * spec.plane_depth
        return torch.from_numpy(texture.sample(world_x, world_y).astype(np.float32))

    b = spec.baseline
    depth = torch.full((spec.height, spec.width), float(spec.plane_depth))
    eye = torch.eye(3)
    return FrameTriplet(
        prev=render(-b),
        center=render(0.0),
        next=render(+b),
        intrinsics=k,
        gt_depth=depth,
        # a point p in frame t has coordinates p - camera_offset in frame t'
        pose_to_prev=Pose(eye, torch.tensor([+b, 0.0, 0.0])),
        pose_to_next=Pose(eye, torch.tensor([-b, 0.0, 0.0])),
        frame_id=f"synthetic {scene_index} c",
    )


def gt_warp_residual(triplet: FrameTriplet) -> float:
    """Photometric-zero oracle: warp each source with the exact depth and
    pose and measure the mean absolute error against the center frame,
    restricted to validly-projected pixels."""
    if triplet.gt_depth is None or triplet.pose_to_next is None:
        raise ValueError("triplet lacks ground truth")
    residuals = []
    for source, pose in (
        (triplet.prev, triplet.pose_to_prev),
        (triplet.next, triplet.pose_to_next),
    ):
        synthesized, valid = synthesize_view(source, triplet.gt_depth, pose, triplet.intrinsics)
        diff = (synthesized - triplet.center).abs().mean(dim=0)
        residuals.append(diff[valid].mean().item())
    return float(np.mean(residuals))


class PlaneDataset:
    """In-memory synthetic dataset: `scenes` triplets differing by texture."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        self._triplets = [generate_synthetic_scene(spec, i) for i in range(spec.scenes)]

    def __len__(self):
        return len(self._triplets)

    def __getitem__(self, index) -> FrameTriplet:
        return self._triplets[index]


# ------------------------------------------------------------- raster IO ----


def write_image_png(path, image: torch.Tensor):
    """(3, H, W) float in [0, 1] -> 8-bit RGB PNG."""
    array = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(array.transpose(1, 2, 0)).save(path)


def read_image(path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Decode to (3, H, W) float32 in [0, 1], optionally resized to
    (width, height) with bilinear filtering."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != size:
                img = img.resize(size, Image.BILINEAR)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(array.transpose(2, 0, 1).copy())


def write_depth_png16(path, depth: np.ndarray):
    """16-bit grayscale PNG at 1/256 m per unit; 0 encodes missing."""
    scaled = np.clip(np.asarray(depth, dtype=np.float64) * 256.0, 0, 65535)
    Image.fromarray(scaled.round().astype(np.uint16)).save(path)


def write_depth_f32(path, depth: np.ndarray):
    """Little-endian float32 raster plus JSON sidecar (shape, units)."""
    path = Path(path)
    depth = np.asarray(depth, dtype="<f4")
    path.write_bytes(depth.tobytes())
    sidecar = {"shape": list(depth.shape), "dtype": "float32", "byte_order": "little", "units": "meters"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_depth(path) -> np.ndarray:
    """Read GT depth from either accepted format; (H, W) float32 meters."""
    path = Path(path)
    if path.suffix == ".png":
        with Image.open(path) as img:
            return np.asarray(img, dtype=np.float32) / 256.0
    if path.suffix == ".f32":
        sidecar = json.loads(path.with_suffix(".f32.json").read_text())
        shape = tuple(sidecar["shape"])
        return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape).copy()
    raise ValueError(f"unsupported depth format {path.suffix!r} (want .png or .f32)")


# ----------------------------------------------------- synthetic on disk ----


def write_synthetic_dataset(spec: SyntheticSceneSpec, out_dir) -> list[Path]:
    """Materialize spec.scenes triplets as PNG frames + exact GT files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "spec.json").write_text(json.dumps(spec.__dict__, indent=2, sort_keys=True))
    scene_dirs = []
    for index in range(spec.scenes):
        triplet = generate_synthetic_scene(spec, index)
        scene_dir = out_dir / f"scene_{index:04d}"
        scene_dir.mkdir(exist_ok=True)
        for name, image in (("prev", triplet.prev), ("center", triplet.center), ("next", triplet.next)):
            write_image_png(scene_dir / f"{name}.png", image)
        write_depth_f32(scene_dir / "depth_center.f32", triplet.gt_depth.numpy())
        k = triplet.intrinsics
        (scene_dir / "intrinsics.json").write_text(
            json.dumps({"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height})
        )
        (scene_dir / "poses.json").write_text(
            json.dumps(
                {
                    "to_prev": {"translation": triplet.pose_to_prev.translation.tolist()},
                    "to_next": {"translation": triplet.pose_to_next.translation.tolist()},
                }
            )
        )
        scene_dirs.append(scene_dir)
    return scene_dirs


class SyntheticDiskDataset:
    """Triplets written by write_synthetic_dataset, read back from disk."""

    def __init__(self, root):
        self.root = Path(root)
        self.scene_dirs = sorted(self.root.glob("scene_*"))
        if not self.scene_dirs:
            raise ValueError(f"no scene_* directories under {self.root}")

    def __len__(self):
        return len(self.scene_dirs)

    def __getitem__(self, index) -> FrameTriplet:
        scene = self.scene_dirs[index]
        k = json.loads((scene / "intrinsics.json").read_text())
        poses = json.loads((scene / "poses.json").read_text())
        eye = torch.eye(3)
        return FrameTriplet(
            prev=read_image(scene / "prev.png"),
            center=read_image(scene / "center.png"),
            next=read_image(scene / "next.png"),
            intrinsics=Intrinsics(**k),
            gt_depth=torch.from_numpy(read_depth(scene / "depth_center.f32")),
            pose_to_prev=Pose(eye, torch.tensor(poses["to_prev"]["translation"], dtype=torch.float32)),
            pose_to_next=Pose(eye, torch.tensor(poses["to_next"]["translation"], dtype=torch.float32)),
            frame_id=scene.name,
        )

    def eval_items(self):
        """(frame_id, center image, gt depth) per scene, for evaluation."""
        for index in range(len(self)):
            triplet = self[index]
            yield triplet.frame_id, triplet.center, triplet.gt_depth.numpy()


# ------------------------------------------------------------ KITTI trees ----


def parse_frame_id(frame_id: str):
    parts = frame_id.split()
    if len(parts) != 3:
        raise ValueError(f"frame id must be '<sequence> <frame_index> <side>', got {frame_id!r}")
    sequence, index, side = parts
    if side not in ("l", "r"):
        raise ValueError(f"side must be 'l' or 'r', got {side!r}")
    return sequence, int(index), side


_SIDE_DIR = {"l": "image_02", "r": "image_03"}


class KittiReader:
    """Resolves frame ids inside a KITTI-layout tree and loads triplets
    resized to the working resolution with intrinsics to match."""

    def __init__(self, root, width: int = 640, height: int = 192, intrinsics: Intrinsics | None = None):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValueError(f"dataset root {self.root} is not a directory")
        self.width = width
        self.height = height
        if intrinsics is None:
            n = KITTI_NORMALIZED_INTRINSICS
            intrinsics = Intrinsics(
                fx=n["fx"] * width,
                fy=n["fy"] * height,
                cx=n["cx"] * width,
                cy=n["cy"] * height,
                width=width,
                height=height,
            )
        self.intrinsics = intrinsics

    def image_path(self, sequence: str, index: int, side: str) -> Path:
        folder = self.root / sequence / _SIDE_DIR[side] / "data"
        for suffix in (".png", ".jpg"):
            candidate = folder / f"{index:010d}{suffix}"
            if candidate.exists():
                return candidate
        raise FrameUnavailable(f"{sequence} {index} {side} not found under {folder}")

    def load_triplet(self, frame_id: str) -> FrameTriplet:
        sequence, index, side = parse_frame_id(frame_id)
        paths = [self.image_path(sequence, index + offset, side) for offset in (-1, 0, 1)]
        size = (self.width, self.height)
        prev, center, nxt = (read_image(p, size) for p in paths)
        return FrameTriplet(
            prev=prev, center=center, next=nxt, intrinsics=self.intrinsics, frame_id=frame_id
        )

    def usable(self, frame_id: str) -> bool:
        try:
            sequence, index, side = parse_frame_id(frame_id)
            for offset in (-1, 0, 1):
                self.image_path(sequence, index + offset, side)
        except (FrameUnavailable, ValueError):
            return False
        return True


def color_jitter(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Brightness/contrast/saturation jitter in the +-20% range."""
    brightness, contrast, saturation = rng.uniform(0.8, 1.2, size=3)
    out = image * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(dim=0, keepdim=True)
    out = gray + (out - gray) * saturation
    return out.clamp(0.0, 1.0)


def horizontal_flip(triplet: FrameTriplet) -> FrameTriplet:
    """Mirror the triplet; cx flips across the image center. Only valid
    without ground-truth poses (mirroring does not conjugate them)."""
    if triplet.pose_to_prev is not None or triplet.pose_to_next is not None:
        raise ValueError("cannot flip a triplet carrying ground-truth poses")
    k = triplet.intrinsics
    flipped_k = Intrinsics(
        fx=k.fx, fy=k.fy, cx=(k.width - 1) - k.cx, cy=k.cy, width=k.width, height=k.height
    )
    flip = lambda t: None if t is None else torch.flip(t, dims=[-1])
    return replace(
        triplet,
        prev=flip(triplet.prev),
        center=flip(triplet.center),
        next=flip(triplet.next),
        gt_depth=flip(triplet.gt_depth),
        aug_prev=flip(triplet.aug_prev),
        aug_center=flip(triplet.aug_center),
        aug_next=flip(triplet.aug_next),
        intrinsics=flipped_k,
    )


class KittiDataset:
    """Split-driven dataset over a KittiReader with seeded augmentation.

    Ids whose neighbors are missing (sequence boundaries) are dropped up
    front. Augmentation draws from a generator derived from (seed, index),
    so epoch composition is reproducible.
    """

    def __init__(self, reader: KittiReader, frame_ids, augment: bool = True, seed: int = 0):
        self.reader = reader
        self.frame_ids = [fid for fid in frame_ids if reader.usable(fid)]
        if not self.frame_ids:
            raise ValueError("no usable frame ids (all missing neighbors?)")
        self.augment = augment
        self.seed = seed

    def __len__(self):
        return len(self.frame_ids)

    def __getitem__(self, index) -> FrameTriplet:
        triplet = self.reader.load_triplet(self.frame_ids[index])
        if not self.augment:
            return triplet
        rng = np.random.default_rng((self.seed, index))
        if rng.random() < 0.5:
            triplet = horizontal_flip(triplet)
        if rng.random() < 0.5:
            jitter = lambda img: color_jitter(img, rng)
            triplet = replace(
                triplet,
                aug_prev=jitter(triplet.prev),
                aug_center=jitter(triplet.center),
                aug_next=jitter(triplet.next),
            )
        return triplet


# --------------------------------------------------------------- splits ----


def safe_frame_name(frame_id: str) -> str:
    """Frame id to a filesystem-safe stem for prediction/depth files."""
    return frame_id.replace("/", "_").replace(" ", "_")


def kitti_eval_items(reader: KittiReader, frame_ids, gt_dir=None):
    """(frame_id, center image, gt depth or None) per id.

    Ground truth is looked up by line index (the split-list convention):
    gt_dir/<index:010d>.png or .f32. Only the center frame needs to exist.
    """
    gt_dir = Path(gt_dir) if gt_dir else None
    for index, frame_id in enumerate(frame_ids):
        try:
            sequence, frame, side = parse_frame_id(frame_id)
            path = reader.image_path(sequence, frame, side)
        except (FrameUnavailable, ValueError):
            yield frame_id, None, None
            continue
        image = read_image(path, (reader.width, reader.height))
        gt = None
        if gt_dir is not None:
            for suffix in (".f32", ".png"):
                candidate = gt_dir / f"{index:010d}{suffix}"
                if candidate.exists():
                    gt = read_depth(candidate)
                    break
        yield frame_id, image, gt


def read_frame_list(path) -> list[str]:
    """One frame id per line; duplicates are dropped with a warning."""
    path = Path(path)
    lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"split file {path} is empty")
    unique = list(dict.fromkeys(lines))
    if len(unique) != len(lines):
        warnings.warn(f"{path}: dropped {len(lines) - len(unique)} duplicate frame ids")
    return unique


@dataclass(frozen=True)
class SplitManifest:
    train: tuple = ()
    val: tuple = ()
    test: tuple = ()

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))

    def is_canonical(self) -> bool:
        return self.counts == (
            CANONICAL_SPLIT_COUNTS["train"],
            CANONICAL_SPLIT_COUNTS["val"],
            CANONICAL_SPLIT_COUNTS["test"],
        )


def load_split(path) -> SplitManifest:
    """Load split lists from a directory holding {train,val,test}_files.txt,
    or from a single list file (placed by its filename, default train)."""
    path = Path(path)
    if path.is_dir():
        lists = {}
        for role in ("train", "val", "test"):
            file = path / f"{role}_files.txt"
            if not file.exists():
                raise ValueError(f"split directory {path} lacks {file.name}")
            lists[role] = tuple(read_frame_list(file))
        return SplitManifest(**lists)

    frames = tuple(read_frame_list(path))
    stem = path.stem.lower()
    for role in ("val", "test", "train"):
        if role in stem:
            return SplitManifest(**{role: frames})
    return SplitManifest(train=frames)
