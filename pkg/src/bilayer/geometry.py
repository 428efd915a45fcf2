"""Warp-field algebra, landmark rasterization and bi-layer compositing.

Conventions fixed here and relied on by the rest of the package:

* Sampling grids use align-corners normalized coordinates: x = -1 lands on
  column 0, x = +1 on column W-1 (same for y/rows). A degenerate 1-wide or
  1-tall axis maps to coordinate 0.
* Coordinates outside [-1, 1] sample zeros (zero padding), so a warped
  texture vanishes outside its support.
* grid[..., 0] is the x (width) coordinate, grid[..., 1] the y coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# iBUG 68-landmark contour groups: (name, index range, closed?) with an RGB
# color in [0, 1]. Drawing order is fixed so rasterization is deterministic.
CONTOUR_GROUPS_68 = (
    ("jaw", range(0, 17), False, (0.0, 1.0, 1.0)),
    ("brow_r", range(17, 22), False, (1.0, 0.5, 0.0)),
    ("brow_l", range(22, 27), False, (1.0, 1.0, 0.0)),
    ("nose_bridge", range(27, 31), False, (0.0, 1.0, 0.0)),
    ("nose_base", range(31, 36), False, (0.0, 0.5, 1.0)),
    ("eye_r", range(36, 42), True, (1.0, 0.0, 0.0)),
    ("eye_l", range(42, 48), True, (1.0, 0.0, 1.0)),
    ("lips_outer", range(48, 60), True, (0.5, 0.0, 1.0)),
    ("lips_inner", range(60, 68), True, (1.0, 1.0, 1.0)),
)


def _identity_axis(n: int, device, dtype) -> torch.Tensor:
    if n == 1:
        return torch.zeros(1, device=device, dtype=dtype)
    return torch.linspace(-1.0, 1.0, n, device=device, dtype=dtype)


def identity_grid_tensor(h: int, w: int, device="cpu", dtype=torch.float32) -> torch.Tensor:
    """(H, W, 2) grid with grid[y, x] = (2x/(W-1)-1, 2y/(H-1)-1)."""
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be >= 1")
    ys = _identity_axis(h, device, dtype)
    xs = _identity_axis(w, device, dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


@dataclass
class WarpField:
    """Sampling coordinates decomposed as identity plus a residual.

    grid and delta have shape (B, H, W, 2) and satisfy grid - delta ==
    identity exactly.
    """

    grid: torch.Tensor
    delta: torch.Tensor

    @classmethod
    def from_delta(cls, delta: torch.Tensor) -> "WarpField":
        if delta.ndim != 4 or delta.shape[-1] != 2:
            raise ValueError(f"delta must be (B, H, W, 2), got {tuple(delta.shape)}")
        _, h, w, _ = delta.shape
        base = identity_grid_tensor(h, w, device=delta.device, dtype=delta.dtype)
        return cls(grid=base.unsqueeze(0) + delta, delta=delta)

    @property
    def spatial_size(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]


def identity_grid(h: int, w: int, batch: int = 1, device="cpu", dtype=torch.float32) -> WarpField:
    delta = torch.zeros(batch, h, w, 2, device=device, dtype=dtype)
    return WarpField.from_delta(delta)


def bilinear_sample(texture: torch.Tensor, warp: WarpField | torch.Tensor) -> torch.Tensor:
    """Sample a texture at warp coordinates with bilinear interpolation.

    texture: (B, C, Ht, Wt); warp grid: (B, H, W, 2) normalized coordinates.
    Returns (B, C, H, W). Out-of-range neighbors contribute zeros. The
    operation is differentiable with respect to both inputs.
    """
    grid = warp.grid if isinstance(warp, WarpField) else warp
    if texture.ndim != 4:
        raise ValueError("texture must be (B, C, H, W)")
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ValueError("warp grid must be (B, H, W, 2)")
    if not torch.isfinite(grid).all():
        raise ValueError("warp grid contains non-finite values")
    b, c, th, tw = texture.shape

    # Unnormalize to texel coordinates under the align-corners convention.
    # Coordinates within 1e-4 texel of a lattice point snap to it in value
    # (straight-through in gradient) so that sampling at an identity grid
    # reproduces the texture exactly despite float rounding.
    def unnormalize(coord, n):
        f = (coord + 1.0) * 0.5 * max(n - 1, 0)
        snapped = torch.round(f)
        snap = torch.where((f - snapped).abs() < 1e-4, snapped - f, torch.zeros_like(f))
        return f + snap.detach()

    fx = unnormalize(grid[..., 0], tw)
    fy = unnormalize(grid[..., 1], th)

    x0 = torch.floor(fx)
    y0 = torch.floor(fy)
    wx = fx - x0
    wy = fy - y0

    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi <= tw - 1) & (yi >= 0) & (yi <= th - 1)
            xc = xi.clamp(0, tw - 1).long()
            yc = yi.clamp(0, th - 1).long()
            flat = (yc * tw + xc).reshape(b, 1, -1).expand(-1, c, -1)
            texel = texture.reshape(b, c, th * tw).gather(2, flat)
            texel = texel.reshape(b, c, *grid.shape[1:3])
            wgt = (wx * dx + (1 - wx) * (1 - dx)) * (wy * dy + (1 - wy) * (1 - dy))
            wgt = (wgt * valid.to(wgt.dtype)).unsqueeze(1)
            out = texel * wgt if out is None else out + texel * wgt
    return out


def composite(lf: torch.Tensor, hf: torch.Tensor) -> torch.Tensor:
    """Sum of the coarse and warped-detail layers. No clamping here;
    clamping to display range happens only at image export."""
    if lf.shape != hf.shape:
        raise ValueError(f"shape mismatch: {tuple(lf.shape)} vs {tuple(hf.shape)}")
    return lf + hf


def _draw_segment(image: np.ndarray, p0, p1, color) -> None:
    """Integer Bresenham line into an (H, W, 3) float array."""
    h, w = image.shape[:2]
    x0, y0 = p0
    x1, y1 = p1
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= y0 < h and 0 <= x0 < w:
            image[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_landmarks(points: np.ndarray, h: int, w: int, groups=CONTOUR_GROUPS_68) -> np.ndarray:
    """Render normalized keypoints as a colored contour drawing ("stickman").

    points: (N, 2) in [0, 1]; returns (H, W, 3) float32 with exact zeros
    outside drawn segments. 1-px polylines, no anti-aliasing, deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be (N, 2)")
    image = np.zeros((h, w, 3), dtype=np.float32)
    n = points.shape[0]
    if groups is CONTOUR_GROUPS_68 and n != 68:
        # Arbitrary schemas fall back to a single open polyline.
        groups = (("all", range(0, n), False, (1.0, 1.0, 1.0)),)
    px = np.clip(np.rint(points[:, 0] * (w - 1)).astype(np.int64), 0, w - 1)
    py = np.clip(np.rint(points[:, 1] * (h - 1)).astype(np.int64), 0, h - 1)
    for _, idx, closed, color in groups:
        idx = list(idx)
        if not idx:
            continue
        chain = idx + [idx[0]] if closed and len(idx) > 2 else idx
        if len(chain) == 1:
            _draw_segment(image, (px[chain[0]], py[chain[0]]),
                          (px[chain[0]], py[chain[0]]), color)
        for a, b in zip(chain[:-1], chain[1:]):
            _draw_segment(image, (px[a], py[a]), (px[b], py[b]), color)
    return image
