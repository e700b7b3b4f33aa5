"""Normalised coordinate grids and rasterisation of an INR at any H x W."""

from __future__ import annotations

import torch

from .errors import DomainError

# Rows go through the network in fixed-size, zero-padded blocks so every pixel
# is computed by the same BLAS kernel whatever the image size; this is what
# makes a 2Hx2W sample agree bit-for-bit with an HxW one on shared coordinates.
BLOCK = 1024


def _check_size(H: int, W: int) -> None:
    if H < 1 or W < 1:
        raise DomainError(f"grid size must be at least 1x1, got {H}x{W}")


def normalize_index(h: int, w: int, H: int, W: int) -> tuple[float, float]:
    _check_size(H, W)
    if not (0 <= h < H and 0 <= w < W):
        raise DomainError(f"index ({h}, {w}) outside a {H}x{W} grid")
    return 2 * h / H - 1, 2 * w / W - 1


def axis_coords(n: int, dtype=torch.float32) -> torch.Tensor:
    # (2i)/n - 1 for i in [0, n): pixel corners, never reaching 1.0
    return (torch.arange(n, dtype=torch.float64) * 2 / n - 1).to(dtype)


def coordinate_grid(H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """Row-major (H*W, 2) tensor of (x, y); x follows the row index, y the column."""
    _check_size(H, W)
    xs, ys = torch.meshgrid(axis_coords(H, dtype), axis_coords(W, dtype), indexing="ij")
    return torch.stack([xs, ys], dim=-1).reshape(-1, 2)


def sample_image(params, H: int, W: int) -> torch.Tensor:
    """Evaluate ``params`` on the H x W grid and return a 3xHxW image (unclamped)."""
    dtype = next(params.parameters()).dtype
    coords = coordinate_grid(H, W, dtype=dtype)
    n = coords.shape[0]
    padded = torch.cat([coords, coords.new_zeros((-n) % BLOCK, 2)])
    rgb = torch.cat([params(block) for block in padded.split(BLOCK)])[:n]
    return rgb.reshape(H, W, 3).permute(2, 0, 1)
