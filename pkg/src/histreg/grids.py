"""Differentiable sampling grids for training and network inference.

These mirror :mod:`histreg.geometry` in torch so gradients flow from an
image loss back into ``theta``.  The TPS solve is linear in the control
point targets, so it is folded into a fixed ``(H*W, N)`` lift matrix per
output shape and the grid becomes ``lift @ (control_points + alpha*theta)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import pixel_centers, tps_control_points, tps_kernel, tps_system


def base_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized pixel centres as ``(H, W, 2)``."""
    return torch.as_tensor(pixel_centers(shape), dtype=dtype, device=device)


def affine_grid(theta: torch.Tensor, alpha: float, shape) -> torch.Tensor:
    """``(B, H, W, 2)`` grid for a batch of raw affine thetas ``(B, 6)``."""
    a = alpha * theta
    one = torch.ones_like(a[:, 0])
    matrix = torch.stack(
        [torch.stack([one + a[:, 0], a[:, 1]], -1), torch.stack([a[:, 3], one + a[:, 4]], -1)],
        dim=1,
    )
    offset = torch.stack([a[:, 2], a[:, 5]], dim=-1)
    pts = base_grid(shape, theta.dtype, theta.device)
    return torch.einsum("hwj,bij->bhwi", pts, matrix) + offset[:, None, None, :]


@lru_cache(maxsize=16)
def _tps_lift(shape, n_grid: int) -> np.ndarray:
    cp = tps_control_points(n_grid)
    n = cp.shape[0]
    solve = np.linalg.inv(tps_system(cp))[:, :n]
    pts = pixel_centers(shape).reshape(-1, 2)
    basis = np.hstack([tps_kernel(pts, cp), np.ones((pts.shape[0], 1)), pts])
    return basis @ solve


def tps_grid(theta: torch.Tensor, alpha: float, shape, n_grid: int = 6) -> torch.Tensor:
    """``(B, H, W, 2)`` grid for raw TPS thetas ``(B, 2*n_grid**2)``."""
    n = n_grid * n_grid
    lift = torch.as_tensor(_tps_lift(tuple(shape), n_grid), dtype=theta.dtype, device=theta.device)
    cp = torch.as_tensor(tps_control_points(n_grid), dtype=theta.dtype, device=theta.device)
    targets = cp + alpha * torch.stack([theta[:, :n], theta[:, n:]], dim=-1)
    out = torch.einsum("pn,bnc->bpc", lift, targets)
    return out.reshape(theta.shape[0], shape[0], shape[1], 2)


def grid_for(kind: str, theta: torch.Tensor, alpha: float, shape) -> torch.Tensor:
    if kind == "affine":
        return affine_grid(theta, alpha, shape)
    if kind == "tps":
        return tps_grid(theta, alpha, shape)
    raise ValueError(f"unknown stage kind {kind!r}")


def warp(images: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp of ``(B, C, H, W)`` images.

    Samples outside ``[-1, 1]^2`` are zero, matching
    :func:`histreg.geometry.sample_bilinear`.
    """
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    inside = (grid.abs() <= 1.0).all(dim=-1).unsqueeze(1)
    return out * inside.to(out.dtype)
