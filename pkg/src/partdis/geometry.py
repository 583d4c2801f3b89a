"""Spatial and photometric image transformations.

Coordinates are normalized to [-1, 1]^2 in (row, col) order everywhere in this
package; pixel units appear only at I/O and metric boundaries. Grids follow the
align-corners convention: index 0 maps to -1 and index n-1 maps to +1, so the
corner samples of an identity grid are exactly (+-1, +-1).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


def make_identity_grid(h, w, dtype=torch.float64, device=None):
    """Return the identity sampling grid of shape (h, w, 2), (row, col) order."""
    if h < 2 or w < 2:
        raise ValueError(f"grid size must be at least 2x2, got {h}x{w}")
    rows = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    cols = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack((rr, cc), dim=-1)


@dataclass
class TpsTransform:
    """Thin-plate-spline deformation plus a global affine map.

    The induced warp is s(u) = A @ [u, 1] + f(u), where f is the TPS
    interpolant of `offsets` at `control_points` (kernel r^2 log r, value 0
    at r = 0). Zero offsets with an identity affine give the identity map.
    """

    control_points: torch.Tensor  # (P, 2) normalized (row, col)
    offsets: torch.Tensor  # (P, 2) displacements at the control points
    affine: torch.Tensor  # (2, 3) matrix [M | t]

    @staticmethod
    def identity(grid_size=5, dtype=torch.float64):
        cps = make_identity_grid(grid_size, grid_size, dtype=dtype).reshape(-1, 2)
        return TpsTransform(
            control_points=cps,
            offsets=torch.zeros_like(cps),
            affine=torch.cat(
                [torch.eye(2, dtype=dtype), torch.zeros(2, 1, dtype=dtype)], dim=1
            ),
        )

    def is_identity(self, tol=0.0):
        eye = torch.cat(
            [
                torch.eye(2, dtype=self.affine.dtype),
                torch.zeros(2, 1, dtype=self.affine.dtype),
            ],
            dim=1,
        )
        return bool(
            (self.offsets.abs().max() <= tol) and ((self.affine - eye).abs().max() <= tol)
        )


@dataclass
class TpsSamplingConfig:
    """Sampling distribution for random TPS transforms.

    Offsets are Normal(0, offset_std) in normalized units on a
    grid_size x grid_size lattice of control points; the affine part jitters
    rotation, isotropic scale, and translation uniformly in the given ranges.
    """

    grid_size: int = 5
    offset_std: float = 0.1
    rotation_range: float = math.radians(15.0)  # +- radians
    scale_range: tuple = (0.9, 1.1)
    translation_range: float = 0.1  # +- normalized units


def sample_tps(cfg, gen, dtype=torch.float64):
    """Draw a random TpsTransform; deterministic under a fixed generator."""
    g = cfg.grid_size
    cps = make_identity_grid(g, g, dtype=dtype).reshape(-1, 2)
    offsets = (
        torch.randn(cps.shape, generator=gen, dtype=dtype) * cfg.offset_std
    )
    theta = (
        (torch.rand((), generator=gen, dtype=dtype) * 2 - 1) * cfg.rotation_range
    )
    lo, hi = cfg.scale_range
    scale = torch.rand((), generator=gen, dtype=dtype) * (hi - lo) + lo
    trans = (
        (torch.rand(2, generator=gen, dtype=dtype) * 2 - 1) * cfg.translation_range
    )
    c, s = torch.cos(theta), torch.sin(theta)
    rot = torch.stack([torch.stack([c, -s]), torch.stack([s, c])]) * scale
    affine = torch.cat([rot, trans.unsqueeze(1)], dim=1)
    return TpsTransform(control_points=cps, offsets=offsets, affine=affine)


def _tps_kernel(r2):
    # r^2 log r = 0.5 * r^2 * log(r^2); the clamp keeps log finite at r = 0,
    # where the product is 0 anyway.
    return 0.5 * r2 * torch.log(r2.clamp_min(1e-30))


def _solve_tps_coefficients(control_points, offsets):
    """Solve the TPS interpolation system for nonaffine weights.

    Returns (w, a): kernel weights (P, 2) and the polynomial part (3, 2)
    of the interpolant f with f(control_points) = offsets.
    """
    p = control_points.shape[0]
    d2 = ((control_points.unsqueeze(1) - control_points.unsqueeze(0)) ** 2).sum(-1)
    k = _tps_kernel(d2)
    ones = torch.ones(p, 1, dtype=control_points.dtype, device=control_points.device)
    pm = torch.cat([ones, control_points], dim=1)  # (P, 3)
    top = torch.cat([k, pm], dim=1)
    bottom = torch.cat(
        [pm.T, torch.zeros(3, 3, dtype=k.dtype, device=k.device)], dim=1
    )
    lhs = torch.cat([top, bottom], dim=0)
    rhs = torch.cat(
        [offsets, torch.zeros(3, 2, dtype=k.dtype, device=k.device)], dim=0
    )
    sol = torch.linalg.solve(lhs, rhs)
    return sol[:p], sol[p:]


def apply_transform(t, grid):
    """Evaluate the warp s on a grid of shape (..., 2), returning s(grid)."""
    shape = grid.shape
    pts = grid.reshape(-1, 2)
    affine = t.affine.to(pts.dtype)
    out = pts @ affine[:, :2].T + affine[:, 2]
    if t.offsets.abs().max() > 0:
        cps = t.control_points.to(pts.dtype)
        w, a = _solve_tps_coefficients(cps, t.offsets.to(pts.dtype))
        d2 = ((pts.unsqueeze(1) - cps.unsqueeze(0)) ** 2).sum(-1)  # (N, P)
        out = out + _tps_kernel(d2) @ w + a[0] + pts @ a[1:]
    return out.reshape(shape)


def warp_image(img, grid):
    """Resample an image at grid coordinates (bilinear, border replication).

    img: (C, H, W) or (B, C, H, W); grid: (h, w, 2) or (B, h, w, 2) in
    normalized (row, col) coordinates. Output pixel u takes the value
    img[grid[u]], so composing with apply_transform realizes x -> x o s.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0).expand(img.shape[0], -1, -1, -1)
    # grid_sample wants (x, y) = (col, row)
    out = F.grid_sample(
        img,
        grid.flip(-1).to(img.dtype),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return out.squeeze(0) if squeeze else out


@dataclass
class AppearanceTransform:
    """Pointwise photometric transform; (0, 1, 0) is the identity.

    Applied as contrast scaling about mid-gray, then a brightness shift, then
    a hue rotation about the gray axis of RGB space, then clipping to [0, 1].
    The hue rotation is a linear map, so it is exactly 2*pi-periodic.
    """

    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    hue_delta: float = 0.0


@dataclass
class AppearanceSamplingConfig:
    brightness_range: float = 0.3  # +-
    contrast_range: tuple = (0.7, 1.3)
    hue_range: float = 0.15  # +- radians


def sample_appearance(cfg, gen):
    u = torch.rand(3, generator=gen, dtype=torch.float64)
    lo, hi = cfg.contrast_range
    return AppearanceTransform(
        brightness_delta=float((u[0] * 2 - 1) * cfg.brightness_range),
        contrast_factor=float(u[1] * (hi - lo) + lo),
        hue_delta=float((u[2] * 2 - 1) * cfg.hue_range),
    )


def hue_rotation_matrix(theta, dtype=torch.float64, device=None):
    """Rotation of RGB space about the gray axis (1,1,1)/sqrt(3) by theta."""
    k = torch.full((3,), 1.0 / math.sqrt(3.0), dtype=dtype, device=device)
    kx = torch.tensor(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]],
        dtype=dtype,
        device=device,
    )
    eye = torch.eye(3, dtype=dtype, device=device)
    outer = k.unsqueeze(1) @ k.unsqueeze(0)
    return math.cos(theta) * eye + math.sin(theta) * kx + (1 - math.cos(theta)) * outer


def apply_appearance(img, t):
    """Apply a photometric transform to an image in [0, 1], clipping the result.

    img: (..., 3, H, W). Pixel positions are untouched.
    """
    if t.contrast_factor <= 0:
        raise ValueError(f"contrast_factor must be positive, got {t.contrast_factor}")
    out = (img - 0.5) * t.contrast_factor + 0.5 + t.brightness_delta
    if t.hue_delta != 0.0:
        rot = hue_rotation_matrix(t.hue_delta, dtype=img.dtype, device=img.device)
        out = torch.einsum("ij,...jhw->...ihw", rot, out)
    return out.clamp(0.0, 1.0)
