"""Classical iterative registration used as a reference backend.

Affine stage: gradient descent on the SSD between prostate masks, run
coarse to fine over Gaussian-smoothed copies of the masks.  Deformable
stage: gradient ascent of a histogram mutual-information estimate over a
cubic B-spline free-form deformation, with early stopping.

Gradients come from torch autograd; the optimizers themselves are plain
(normalized) gradient steps with a bold-driver step size: a step that
improves the objective is accepted and the step grows, otherwise it is
rejected and the step halves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import grids
from .geometry import (
    AffineTransform,
    BSplineTransform,
    ThetaVector,
    Transform2D,
    affine_from_theta,
    bspline_weights,
    pixel_centers,
)


class OptimizationError(RuntimeError):
    pass


class DegenerateHistogramError(ValueError):
    pass


@dataclass
class IterativeConfig:
    step_size: float = 0.05
    max_iters: int = 300
    mi_bins: int = 32
    ffd_grid: tuple[int, int] = (8, 8)
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    mask_sigmas: tuple[float, ...] = (4.0, 2.0, 0.0)

    def __post_init__(self):
        self.ffd_grid = tuple(int(v) for v in self.ffd_grid)
        self.mask_sigmas = tuple(float(v) for v in self.mask_sigmas)
        if self.step_size <= 0 or self.max_iters <= 0 or self.early_stop_patience <= 0:
            raise ValueError("step size, iteration count and patience must be positive")
        if self.early_stop_min_delta < 0:
            raise ValueError("early_stop_min_delta must be non-negative")
        if self.mi_bins < 8:
            raise ValueError("mi_bins must be at least 8")
        if min(self.ffd_grid) < 4:
            raise ValueError("the B-spline grid needs at least 4 knots per axis")


@dataclass
class OptimizationTrace:
    """Objective values at accepted iterates, one segment per optimizer run.

    The affine stage runs once per smoothing level, so its objective
    changes between segments.
    """

    segments: list[list[float]] = field(default_factory=list)
    iterations: int = 0
    best_iteration: int = 0
    stopped_early: bool = False

    @property
    def accepted(self) -> list[float]:
        return [v for seg in self.segments for v in seg]


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))[None, None]


def _bold_driver(objective, x0: torch.Tensor, step: float, max_iters: int, trace: OptimizationTrace,
                 maximize: bool = False, patience: int | None = None, min_delta: float = 0.0):
    """Normalized gradient steps with accept/reject step control.

    Returns the best iterate.  With ``patience`` set, stops once the best
    value has not improved by more than ``min_delta`` for that many
    iterations.
    """
    sign = -1.0 if maximize else 1.0
    x = x0.clone().requires_grad_(True)
    val = objective(x)
    seg: list[float] = []
    trace.segments.append(seg)
    if not torch.isfinite(val):
        raise OptimizationError("objective is not finite at the initial point")
    (grad,) = torch.autograd.grad(sign * val, x)
    best_x, best_val = x.detach().clone(), float(val.detach())
    seg.append(best_val)
    since_best = 0
    for it in range(max_iters):
        trace.iterations += 1
        gnorm = float(grad.norm())
        if gnorm == 0.0 or step < 1e-8:
            break
        cand = (x.detach() - step * grad / gnorm).requires_grad_(True)
        cval = objective(cand)
        if not torch.isfinite(cval):
            raise OptimizationError("objective diverged to a non-finite value")
        improved = sign * float(cval.detach()) < sign * float(val.detach())
        if improved:
            x, val = cand, cval
            (grad,) = torch.autograd.grad(sign * val, x)
            seg.append(float(val.detach()))
            step *= 1.2
            if sign * float(val.detach()) < sign * best_val:
                significant = sign * (best_val - float(val.detach())) > min_delta
                best_x, best_val = x.detach().clone(), float(val.detach())
                trace.best_iteration = it + 1
                if significant:
                    since_best = 0
                else:
                    since_best += 1
        else:
            step *= 0.5
            since_best += 1
        if patience is not None and since_best >= patience:
            trace.stopped_early = True
            break
    return best_x, best_val


# ---------------------------------------------------------------------------
# affine stage


def _mask_ssd(moving: torch.Tensor, fixed: torch.Tensor, alpha: float):
    def objective(theta):
        grid = grids.affine_grid(theta[None], alpha, fixed.shape[-2:])
        warped = grids.warp(moving, grid)
        return ((fixed - warped) ** 2).mean()

    return objective


def affine_register_masks(moving_mask, fixed_mask, cfg: IterativeConfig | None = None,
                          trace: OptimizationTrace | None = None) -> AffineTransform:
    """Affine map minimizing the SSD between the fixed and warped moving mask."""
    cfg = cfg or IterativeConfig()
    trace = trace if trace is not None else OptimizationTrace()
    mov = np.asarray(getattr(moving_mask, "pixels", moving_mask), dtype=np.float64)
    fix = np.asarray(getattr(fixed_mask, "pixels", fixed_mask), dtype=np.float64)
    if mov.shape != fix.shape:
        raise ValueError(f"mask shapes differ: {mov.shape} vs {fix.shape}")
    if not mov.any() or not fix.any():
        raise ValueError("affine registration needs nonempty masks")
    alpha = 0.1
    theta = torch.zeros(6, dtype=torch.float64)
    iters = max(1, cfg.max_iters // len(cfg.mask_sigmas))
    for sigma in cfg.mask_sigmas:
        m = ndimage.gaussian_filter(mov, sigma) if sigma > 0 else mov
        f = ndimage.gaussian_filter(fix, sigma) if sigma > 0 else fix
        theta, _ = _bold_driver(_mask_ssd(_tensor(m), _tensor(f), alpha), theta, cfg.step_size, iters, trace)
    return affine_from_theta(ThetaVector(theta.numpy(), "affine", alpha))


# ---------------------------------------------------------------------------
# mutual information


def _unit_range(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        raise DegenerateHistogramError("constant image has a degenerate intensity histogram")
    return (img - lo) / (hi - lo)


def joint_histogram(a: np.ndarray, b: np.ndarray, bins: int, mode: str = "linear") -> np.ndarray:
    """Normalized joint histogram of two images scaled to ``[0, 1]``.

    ``mode="hard"`` assigns each pixel to one bin; ``"linear"`` splits it
    between the two nearest bin centres (partial-volume binning).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if mode == "hard":
        ia = np.minimum((a * bins).astype(int), bins - 1)
        ib = np.minimum((b * bins).astype(int), bins - 1)
        hist = np.zeros((bins, bins))
        np.add.at(hist, (ia, ib), 1.0)
    elif mode == "linear":
        hist = _linear_hist(torch.as_tensor(a), torch.as_tensor(b), bins).numpy()
    else:
        raise ValueError(f"unknown binning mode {mode!r}")
    return hist / hist.sum()


def _linear_hist(a: torch.Tensor, b: torch.Tensor, bins: int) -> torch.Tensor:
    ua = a.clamp(0, 1) * (bins - 1)
    ub = b.clamp(0, 1) * (bins - 1)
    ia = ua.detach().floor().clamp(max=bins - 2)
    ib = ub.detach().floor().clamp(max=bins - 2)
    fa, fb = ua - ia, ub - ib
    ia, ib = ia.long(), ib.long()
    hist = torch.zeros(bins * bins, dtype=a.dtype)
    for da, wa in ((0, 1 - fa), (1, fa)):
        for db, wb in ((0, 1 - fb), (1, fb)):
            hist = hist.index_add(0, (ia + da) * bins + (ib + db), wa * wb)
    return hist.reshape(bins, bins)


def _mi_from_hist(p):
    lib = torch if isinstance(p, torch.Tensor) else np
    pa = p.sum(1, keepdims=True) if lib is np else p.sum(1, keepdim=True)
    pb = p.sum(0, keepdims=True) if lib is np else p.sum(0, keepdim=True)
    outer = pa * pb
    nz = p > 0
    ratio = lib.where(nz, p / lib.where(nz, outer, 1.0), 1.0)
    return (p * lib.log(ratio)).sum()


def mutual_information(a, b, bins: int = 32, mode: str = "linear") -> float:
    """Mutual information (nats) of two images after min-max scaling."""
    a = _unit_range(np.asarray(a, dtype=np.float64))
    b = _unit_range(np.asarray(b, dtype=np.float64))
    return float(_mi_from_hist(joint_histogram(a, b, bins, mode)))


def entropy(a, bins: int = 32) -> float:
    a = _unit_range(np.asarray(a, dtype=np.float64)).ravel()
    idx = np.minimum((a * bins).astype(int), bins - 1)
    p = np.bincount(idx, minlength=bins) / a.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# deformable stage


def _affine_torch(init: Transform2D):
    if isinstance(init, AffineTransform):
        m = torch.as_tensor(init.matrix)
        o = torch.as_tensor(init.offset)
        return lambda pts: pts @ m.T + o
    raise TypeError("deformable registration expects an affine initialization")


def deformable_register_mi(moving_img, fixed_img, init: Transform2D | None = None,
                           cfg: IterativeConfig | None = None,
                           trace: OptimizationTrace | None = None):
    """Free-form deformation maximizing mutual information on top of ``init``.

    Returns ``(affine, bspline)``; the full map is ``affine(bspline(p))``.
    """
    cfg = cfg or IterativeConfig()
    trace = trace if trace is not None else OptimizationTrace()
    init = init if init is not None else affine_from_theta(ThetaVector.zeros("affine"))
    mov = _unit_range(np.asarray(getattr(moving_img, "pixels", moving_img), dtype=np.float64))
    fix = _unit_range(np.asarray(getattr(fixed_img, "pixels", fixed_img), dtype=np.float64))
    h, w = fix.shape
    gy, gx = cfg.ffd_grid
    pts = torch.as_tensor(pixel_centers((h, w)))
    wx = torch.as_tensor(bspline_weights(pts[0, :, 0].numpy(), gx))
    wy = torch.as_tensor(bspline_weights(pts[:, 0, 1].numpy(), gy))
    apply_init = _affine_torch(init)
    mov_t = _tensor(mov)
    fix_flat = torch.as_tensor(fix).reshape(-1)
    bins = cfg.mi_bins

    def objective(coeffs):
        c = coeffs.reshape(gy, gx, 2)
        disp = torch.einsum("hi,wj,ijc->hwc", wy, wx, c)
        grid = apply_init(pts + disp)[None]
        warped = grids.warp(mov_t, grid).reshape(-1)
        return _mi_from_hist(_linear_hist(fix_flat, warped, bins) / fix_flat.numel())

    x0 = torch.zeros(gy * gx * 2, dtype=torch.float64)
    # step in normalized units of control-point displacement
    best, _ = _bold_driver(
        objective, x0, cfg.step_size * 0.1, cfg.max_iters, trace, maximize=True,
        patience=cfg.early_stop_patience, min_delta=cfg.early_stop_min_delta,
    )
    return init, BSplineTransform(best.numpy().reshape(gy, gx, 2))


def register_iterative(moving_mask, fixed_mask, moving_img, fixed_img, cfg: IterativeConfig | None = None):
    """Both stages; returns ``(affine, bspline)``."""
    cfg = cfg or IterativeConfig()
    affine = affine_register_masks(moving_mask, fixed_mask, cfg)
    return deformable_register_mi(moving_img, fixed_img, affine, cfg)
