"""Pinhole camera geometry and differentiable view synthesis.

Conventions (fixed so that tests can be bit-exact):
    - Pixel centers sit at integer coordinates, origin at the top-left
      pixel, u grows rightward, v grows downward.
    - A pinhole camera with intrinsics (fx, fy, cx, cy) maps a camera-frame
      point p = (x, y, z), z > 0, to pixel (fx*x/z + cx, fy*y/z + cy).
    - A rigid transform T = (R, t) maps points as p' = R @ p + t.

All tensor-valued functions are pure, differentiable where meaningful, and
broadcast over arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Transformed points with z below this are treated as behind the camera and
# masked out of the projection instead of raising.
Z_EPS = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus the image size they refer to.

    Scaling by a factor s multiplies every field by s, so the same physical
    camera can be carried through a multi-scale pyramid.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """The 3x3 calibration matrix K."""
        k = torch.eye(3, dtype=dtype, device=device)
        k[0, 0] = self.fx
        k[1, 1] = self.fy
        k[0, 2] = self.cx
        k[1, 2] = self.cy
        return k

    def inverse_matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """Closed-form K^-1 (avoids a numeric inverse)."""
        k = torch.eye(3, dtype=dtype, device=device)
        k[0, 0] = 1.0 / self.fx
        k[1, 1] = 1.0 / self.fy
        k[0, 2] = -self.cx / self.fx
        k[1, 2] = -self.cy / self.fy
        return k

    def scaled(self, factor) -> "Intrinsics":
        return scale_intrinsics(self, factor)


def scale_intrinsics(k: Intrinsics, factor) -> Intrinsics:
    """Rescale intrinsics to an image resized by `factor`.

    The resulting width/height must be integral; a factor that produces a
    fractional image size is an error rather than a silent round.
    """
    factor = float(factor)
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    new_w = k.width * factor
    new_h = k.height * factor
    if abs(new_w - round(new_w)) > 1e-6 or abs(new_h - round(new_h)) > 1e-6:
        raise ValueError(
            f"factor {factor} does not scale {k.width}x{k.height} to an integral size"
        )
    return Intrinsics(
        fx=k.fx * factor,
        fy=k.fy * factor,
        cx=k.cx * factor,
        cy=k.cy * factor,
        width=int(round(new_w)),
        height=int(round(new_h)),
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform (rotation, translation), broadcastable over batches.

    rotation: (..., 3, 3) orthonormal with det +1; translation: (..., 3).
    """

    rotation: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        if self.rotation.shape[-2:] != (3, 3):
            raise ValueError(f"rotation must be (..., 3, 3), got {tuple(self.rotation.shape)}")
        if self.translation.shape[-1] != 3:
            raise ValueError(f"translation must be (..., 3), got {tuple(self.translation.shape)}")
        if not (torch.isfinite(self.rotation).all() and torch.isfinite(self.translation).all()):
            raise ValueError("pose contains non-finite values")

    @staticmethod
    def identity(dtype=torch.float32, device=None) -> "Pose":
        return Pose(torch.eye(3, dtype=dtype, device=device), torch.zeros(3, dtype=dtype, device=device))

    def inverse(self) -> "Pose":
        rot_t = self.rotation.transpose(-1, -2)
        return Pose(rot_t, -(rot_t @ self.translation.unsqueeze(-1)).squeeze(-1))

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other)(p) = self(other(p))."""
        rot = self.rotation @ other.rotation
        trans = (self.rotation @ other.translation.unsqueeze(-1)).squeeze(-1) + self.translation
        return Pose(rot, trans)

    def matrix(self) -> torch.Tensor:
        """Homogeneous (..., 4, 4) form."""
        batch = self.rotation.shape[:-2]
        mat = torch.zeros(*batch, 4, 4, dtype=self.rotation.dtype, device=self.rotation.device)
        mat[..., :3, :3] = self.rotation
        mat[..., :3, 3] = self.translation
        mat[..., 3, 3] = 1.0
        return mat

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform a point field whose leading dims start with the pose's
        batch dims, e.g. a (B,)-batched pose applied to (B, H, W, 3)."""
        rot, trans = self.rotation, self.translation
        extra = (points.ndim - 1) - (rot.ndim - 2)
        if extra < 0:
            raise ValueError(
                f"points {tuple(points.shape)} have fewer batch dims than pose "
                f"{tuple(rot.shape)}"
            )
        for _ in range(extra):
            rot = rot.unsqueeze(-3)
            trans = trans.unsqueeze(-2)
        return (rot @ points.unsqueeze(-1)).squeeze(-1) + trans

    def orthonormality_error(self) -> float:
        eye = torch.eye(3, dtype=self.rotation.dtype, device=self.rotation.device)
        return (self.rotation.transpose(-1, -2) @ self.rotation - eye).abs().max().item()


def pose_from_6dof(vec: torch.Tensor) -> Pose:
    """Exponentiate a 6-DOF vector [rx, ry, rz, tx, ty, tz] into a Pose.

    The rotation part is axis-angle, turned into a matrix with the Rodrigues
    formula; the map is smooth in `vec` (including at zero rotation, where a
    Taylor expansion replaces the sin/cos ratios), so gradients flow through
    pose regression.
    """
    if not isinstance(vec, torch.Tensor):
        vec = torch.as_tensor(vec, dtype=torch.float32)
    if vec.shape[-1] != 6:
        raise ValueError(f"expected a (..., 6) vector, got {tuple(vec.shape)}")
    if not torch.isfinite(vec).all():
        raise ValueError("6-DOF vector contains non-finite values")

    omega = vec[..., :3]
    translation = vec[..., 3:]

    theta_sq = (omega * omega).sum(-1, keepdim=True).unsqueeze(-1)  # (..., 1, 1)
    # clamp keeps the discarded branch of the torch.where free of 0/0, whose
    # NaNs would otherwise poison gradients at zero rotation
    theta_sq_safe = theta_sq.clamp(min=1e-12)
    theta = torch.sqrt(theta_sq_safe)

    zero = torch.zeros_like(omega[..., 0])
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    skew = torch.stack(
        [
            torch.stack([zero, -wz, wy], dim=-1),
            torch.stack([wz, zero, -wx], dim=-1),
            torch.stack([-wy, wx, zero], dim=-1),
        ],
        dim=-2,
    )

    small = theta_sq < 1e-8
    sin_term = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    cos_term = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe)

    eye = torch.eye(3, dtype=vec.dtype, device=vec.device).expand_as(skew)
    rotation = eye + sin_term * skew + cos_term * (skew @ skew)
    return Pose(rotation, translation)


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Dense homogeneous pixel coordinates, shape (H, W, 3), last entry 1.

    grid[v, u] = (u, v, 1). Row-major, regenerated identically for the same
    size.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid size must be >= 1, got {height}x{width}")
    vs = torch.arange(height, dtype=dtype, device=device)
    us = torch.arange(width, dtype=dtype, device=device)
    grid_v, grid_u = torch.meshgrid(vs, us, indexing="ij")
    return torch.stack([grid_u, grid_v, torch.ones_like(grid_u)], dim=-1)


def backproject(depth: torch.Tensor, intrinsics: Intrinsics, grid: torch.Tensor | None = None) -> torch.Tensor:
    """Lift a depth map to a camera-frame point field.

    point(u, v) = depth(u, v) * K^-1 @ (u, v, 1); the z component therefore
    equals the depth exactly.

    depth: (..., H, W); returns (..., H, W, 3).
    """
    h, w = depth.shape[-2], depth.shape[-1]
    if grid is None:
        grid = pixel_grid(h, w, dtype=depth.dtype, device=depth.device)
    if grid.shape != (h, w, 3):
        raise ValueError(f"grid shape {tuple(grid.shape)} does not match depth {h}x{w}")
    rays = grid @ intrinsics.inverse_matrix(dtype=depth.dtype, device=depth.device).T
    return depth.unsqueeze(-1) * rays


def project(
    points: torch.Tensor,
    pose: Pose,
    intrinsics: Intrinsics,
    z_eps: float = Z_EPS,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rigidly move a point field and project it to pixel coordinates.

    Applies p' = R @ p + t, then the pinhole map with perspective divide.
    Returns (coords, valid):
        coords: (..., H, W, 2) pixel coordinates (garbage where invalid,
                but always finite);
        valid:  (..., H, W) bool, False where z' <= z_eps or the projected
                pixel falls outside [0, W-1] x [0, H-1].

    No exception is raised for degenerate points -- they are masked.
    """
    if points.shape[-1] != 3:
        raise ValueError(f"points must be (..., H, W, 3), got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("points contain non-finite values")

    moved = pose.apply(points)
    z = moved[..., 2]
    safe_z = z.clamp(min=z_eps)
    u = intrinsics.fx * moved[..., 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * moved[..., 1] / safe_z + intrinsics.cy
    coords = torch.stack([u, v], dim=-1)

    # small slack so pixels that land numerically on the border stay valid
    tol = 1e-4
    valid = (
        (z > z_eps)
        & (u >= -tol)
        & (u <= intrinsics.width - 1 + tol)
        & (v >= -tol)
        & (v <= intrinsics.height - 1 + tol)
    )
    return coords, valid


def warp(source: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample `source` at pixel-unit `coords`.

    source: (..., C, H, W); coords: (..., H, W, 2) in the target frame, in
    pixel units of the source image. Sampling clamps to the border
    (clamp-to-edge), so out-of-range coordinates produce edge values rather
    than zeros; invalidity is carried separately by the mask from project().
    Differentiable w.r.t. both the image and the coordinates.
    """
    if source.ndim < 3:
        raise ValueError(f"source must be (..., C, H, W), got {tuple(source.shape)}")
    if coords.shape[-1] != 2:
        raise ValueError(f"coords must be (..., H, W, 2), got {tuple(coords.shape)}")
    h, w = source.shape[-2], source.shape[-1]
    if coords.shape[-3] != h or coords.shape[-2] != w:
        raise ValueError(
            f"coords spatial shape {tuple(coords.shape[-3:-1])} does not match image {h}x{w}"
        )
    if source.shape[:-3] != coords.shape[:-3]:
        raise ValueError("source and coords batch shapes differ")

    batch_shape = source.shape[:-3]
    c = source.shape[-3]
    src = source.reshape(-1, c, h, w)
    crd = coords.reshape(-1, h, w, 2)
    n = src.shape[0]

    # clamp-to-edge, then gather the four corners by hand; at integer
    # coordinates the fractional weights are exactly zero, so identity
    # sampling is bit-exact (grid_sample's normalize/denormalize round trip
    # is not)
    x = crd[..., 0].clamp(0.0, float(w - 1))
    y = crd[..., 1].clamp(0.0, float(h - 1))
    x0 = x.floor()
    y0 = y.floor()
    fx = x - x0
    fy = y - y0
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = src.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    i00 = gather(y0l, x0l)
    i01 = gather(y0l, x1l)
    i10 = gather(y1l, x0l)
    i11 = gather(y1l, x1l)

    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    top = i00 + fx * (i01 - i00)
    bottom = i10 + fx * (i11 - i10)
    sampled = top + fy * (bottom - top)
    return sampled.reshape(*batch_shape, c, h, w)


def synthesize_view(
    source: torch.Tensor,
    depth: torch.Tensor,
    pose: Pose,
    intrinsics: Intrinsics,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full view synthesis: backproject target depth, move by pose, sample source.

    source: (..., C, H, W) image of the *source* frame; depth: (..., H, W)
    depth of the *target* frame; pose: target-to-source transform.
    Returns (synthesized target-frame image, validity mask).
    """
    points = backproject(depth, intrinsics)
    coords, valid = project(points, pose, intrinsics)
    return warp(source, coords), valid
