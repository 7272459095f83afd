"""Transforms on the normalized image domain and image warping.

Every transform maps points of the fixed image, expressed in normalized
coordinates ``[-1, 1]^2`` (``x`` along columns, ``y`` along rows), to points
of the moving image in the same normalized frame.  Warping is backward: the
output pixel at ``p`` receives ``moving(phi(p))``.

Pixel centres follow the half-pixel convention, so pixel column ``c`` of a
raster of width ``W`` sits at ``x = (2c + 1) / W - 1``.  With this
convention a transform estimated on a small canvas applies unchanged to the
full-resolution raster of the same field of view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_ALPHA = 0.1
TPS_GRID_SIZE = 6


class ParameterShapeError(ValueError):
    pass


class TPSSolveError(np.linalg.LinAlgError):
    pass


class WarpError(ValueError):
    pass


@dataclass
class Image2D:
    """Raster with physical pixel spacing.

    ``pixels`` is ``(H, W)`` for single-channel data or ``(H, W, C)``.
    ``spacing`` is ``(sx, sy)`` in mm/pixel.  ``origin`` records the
    ``(row, col)`` offset of this raster inside the raster it was cropped
    from, which is what lets labels be traced back to native coordinates.
    """

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim not in (2, 3):
            raise ValueError(f"expected a 2D or 3D array, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.origin = (int(self.origin[0]), int(self.origin[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    def replace(self, pixels=None, spacing=None, origin=None) -> "Image2D":
        return Image2D(
            self.pixels if pixels is None else pixels,
            self.spacing if spacing is None else spacing,
            self.origin if origin is None else origin,
        )


@dataclass(frozen=True)
class ThetaVector:
    """Raw regression output together with its scale ``alpha``.

    The induced transform is ``alpha * values + identity``; see
    :func:`affine_from_theta` and :func:`tps_from_theta`.
    """

    values: np.ndarray
    kind: str = "affine"
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.kind not in ("affine", "tps"):
            raise ParameterShapeError(f"unknown theta kind {self.kind!r}")
        expected = theta_length(self.kind)
        if values.size != expected:
            raise ParameterShapeError(
                f"{self.kind} theta needs {expected} values, got {values.size}"
            )
        if not self.alpha > 0:
            raise ParameterShapeError(f"alpha must be positive, got {self.alpha}")

    @classmethod
    def zeros(cls, kind: str, alpha: float = DEFAULT_ALPHA) -> "ThetaVector":
        return cls(np.zeros(theta_length(kind)), kind, alpha)


def theta_length(kind: str) -> int:
    if kind == "affine":
        return 6
    if kind == "tps":
        return 2 * TPS_GRID_SIZE * TPS_GRID_SIZE
    raise ParameterShapeError(f"unknown theta kind {kind!r}")


# ---------------------------------------------------------------------------
# coordinates


def pixel_centers(shape: Sequence[int]) -> np.ndarray:
    """Normalized ``(x, y)`` coordinates of every pixel centre, shape ``(H, W, 2)``."""
    h, w = int(shape[0]), int(shape[1])
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def normalized_to_pixel(points, shape) -> np.ndarray:
    """Map normalized ``(x, y)`` to fractional ``(col, row)`` pixel indices."""
    points = np.asarray(points, dtype=np.float64)
    h, w = shape[0], shape[1]
    col = ((points[..., 0] + 1.0) * w - 1.0) / 2.0
    row = ((points[..., 1] + 1.0) * h - 1.0) / 2.0
    return np.stack([col, row], axis=-1)


def pixel_to_normalized(pixels, shape) -> np.ndarray:
    """Inverse of :func:`normalized_to_pixel`; input is ``(col, row)``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = shape[0], shape[1]
    x = (2.0 * pixels[..., 0] + 1.0) / w - 1.0
    y = (2.0 * pixels[..., 1] + 1.0) / h - 1.0
    return np.stack([x, y], axis=-1)


def tps_control_points(n: int = TPS_GRID_SIZE) -> np.ndarray:
    """Regular ``n x n`` lattice over ``[-1, 1]^2``, boundary inclusive.

    Ordered row-major: index ``k = iy * n + ix``.
    """
    ticks = np.linspace(-1.0, 1.0, n)
    gx, gy = np.meshgrid(ticks, ticks)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


# ---------------------------------------------------------------------------
# transforms


class Transform2D:
    """Base class; subclasses implement ``__call__`` on ``(..., 2)`` arrays."""

    kind: str = ""

    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def jacobian_determinant(self, shape=(100, 100), eps: float = 1e-4) -> np.ndarray:
        """Central finite-difference Jacobian determinant on a probe grid."""
        pts = pixel_centers(shape)
        dx = np.array([eps, 0.0])
        dy = np.array([0.0, eps])
        d_dx = (self(pts + dx) - self(pts - dx)) / (2 * eps)
        d_dy = (self(pts + dy) - self(pts - dy)) / (2 * eps)
        return d_dx[..., 0] * d_dy[..., 1] - d_dx[..., 1] * d_dy[..., 0]


class AffineTransform(Transform2D):
    kind = "affine"

    def __init__(self, matrix, offset, theta: ThetaVector | None = None):
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(2, 2)
        self.offset = np.asarray(offset, dtype=np.float64).reshape(2)
        self.theta = theta

    def __call__(self, points):
        # elementwise rather than matmul so a point's image does not depend
        # on the batch it is evaluated in
        p = np.asarray(points, dtype=np.float64)
        (a, b), (c, d) = self.matrix
        x, y = p[..., 0], p[..., 1]
        return np.stack([a * x + b * y + self.offset[0], c * x + d * y + self.offset[1]], axis=-1)

    def to_dict(self):
        if self.theta is None:
            theta = theta_from_affine(self.matrix, self.offset)
        else:
            theta = self.theta
        return {"kind": "affine", "alpha": theta.alpha, "theta": theta.values.tolist()}


class TPSTransform(Transform2D):
    """Interpolating thin-plate spline, applied independently to x and y."""

    kind = "tps"

    def __init__(self, control_points, targets, theta: ThetaVector | None = None):
        self.control_points = np.asarray(control_points, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.theta = theta
        self.weights, self.affine = solve_tps(self.control_points, self.targets)

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        flat = points.reshape(-1, 2)
        kernel = tps_kernel(flat, self.control_points)
        out = kernel @ self.weights + self.affine[0] + flat @ self.affine[1:]
        return out.reshape(points.shape)

    def to_dict(self):
        theta = self.theta
        if theta is None:
            disp = (self.targets - self.control_points) / DEFAULT_ALPHA
            theta = ThetaVector(np.concatenate([disp[:, 0], disp[:, 1]]), "tps")
        return {
            "kind": "tps",
            "alpha": theta.alpha,
            "theta": theta.values.tolist(),
            "control_points": self.control_points.tolist(),
        }


class BSplineTransform(Transform2D):
    """Cubic B-spline free-form displacement: ``phi(p) = p + d(p)``.

    ``coefficients`` has shape ``(gy, gx, 2)``; knots are spread uniformly
    over ``[-1, 1]`` so that the first and last knot sit on the boundary.
    """

    kind = "bspline"

    def __init__(self, coefficients):
        self.coefficients = np.asarray(coefficients, dtype=np.float64)
        if self.coefficients.ndim != 3 or self.coefficients.shape[2] != 2:
            raise ParameterShapeError("bspline coefficients must be (gy, gx, 2)")

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        flat = points.reshape(-1, 2)
        gy, gx, _ = self.coefficients.shape
        wx = bspline_weights(flat[:, 0], gx)
        wy = bspline_weights(flat[:, 1], gy)
        disp = np.einsum("ni,nj,ijc->nc", wy, wx, self.coefficients)
        return (flat + disp).reshape(points.shape)

    def to_dict(self):
        return {"kind": "bspline", "coefficients": self.coefficients.tolist()}


class CompositeTransform(Transform2D):
    """Chain of stages evaluated right to left: ``stages[0](stages[1](...))``."""

    kind = "composite"

    def __init__(self, stages: Sequence[Transform2D]):
        self.stages = list(stages)
        if not self.stages:
            raise ValueError("composite needs at least one stage")

    def __call__(self, points):
        out = np.asarray(points, dtype=np.float64)
        for stage in reversed(self.stages):
            out = stage(out)
        return out

    def to_dict(self):
        return {"kind": "composite", "stages": [s.to_dict() for s in self.stages]}


def tps_kernel(points, control_points) -> np.ndarray:
    """``U(r) = r^2 log r^2`` between every point and every control point."""
    diff = points[:, None, :] - control_points[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(r2 > 0.0, r2 * np.log(r2), 0.0)
    return u


def tps_system(control_points) -> np.ndarray:
    """The ``(N+3) x (N+3)`` TPS interpolation matrix ``[[K, P], [P^T, 0]]``."""
    cp = np.asarray(control_points, dtype=np.float64)
    n = cp.shape[0]
    P = np.hstack([np.ones((n, 1)), cp])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = tps_kernel(cp, cp)
    L[:n, n:] = P
    L[n:, :n] = P.T
    return L


def solve_tps(control_points, targets):
    """Solve for kernel weights ``(N, 2)`` and affine part ``(3, 2)``.

    The affine rows are ordered ``[constant, x, y]``.
    """
    cp = np.asarray(control_points, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = cp.shape[0]
    if targets.shape != (n, 2):
        raise ParameterShapeError(f"targets must be ({n}, 2), got {targets.shape}")
    if n < 3:
        raise TPSSolveError("thin-plate spline needs at least 3 control points")
    L = tps_system(cp)
    # coincident or collinear control points make L singular
    if np.linalg.cond(L) > 1e12:
        raise TPSSolveError("singular thin-plate spline system")
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = targets
    sol = np.linalg.solve(L, rhs)
    return sol[:n], sol[n:]


def bspline_basis(t):
    """Uniform cubic B-spline basis values for local parameter ``t`` in [0, 1)."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack(
        [
            (1 - t) ** 3 / 6.0,
            (3 * t**3 - 6 * t**2 + 4) / 6.0,
            (-3 * t**3 + 3 * t**2 + 3 * t + 1) / 6.0,
            t**3 / 6.0,
        ],
        axis=-1,
    )


def bspline_weights(coord, n_knots: int) -> np.ndarray:
    """Dense ``(M, n_knots)`` weight matrix for normalized coordinates.

    Knot ``i`` sits at ``-1 + 2 i / (n_knots - 1)``; points beyond the knot
    span get contributions from the boundary knots only.
    """
    coord = np.asarray(coord, dtype=np.float64)
    step = 2.0 / (n_knots - 1)
    u = (coord + 1.0) / step
    base = np.floor(u).astype(int)
    t = u - base
    basis = bspline_basis(t)
    weights = np.zeros((coord.size, n_knots))
    rows = np.arange(coord.size)
    for offset in range(4):
        idx = base + offset - 1
        ok = (idx >= 0) & (idx < n_knots)
        np.add.at(weights, (rows[ok], idx[ok]), basis[ok, offset])
    return weights


# ---------------------------------------------------------------------------
# theta parameterizations


def affine_from_theta(theta: ThetaVector) -> AffineTransform:
    """Identity-anchored affine map from a 6-vector and its scale ``alpha``."""
    if theta.kind != "affine":
        raise ParameterShapeError(f"expected affine theta, got {theta.kind}")
    a = theta.alpha * theta.values
    matrix = np.array([[1.0 + a[0], a[1]], [a[3], 1.0 + a[4]]])
    offset = np.array([a[2], a[5]])
    return AffineTransform(matrix, offset, theta)


def theta_from_affine(matrix, offset, alpha: float = DEFAULT_ALPHA) -> ThetaVector:
    matrix = np.asarray(matrix, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    values = np.array(
        [
            matrix[0, 0] - 1.0,
            matrix[0, 1],
            offset[0],
            matrix[1, 0],
            matrix[1, 1] - 1.0,
            offset[1],
        ]
    )
    return ThetaVector(values / alpha, "affine", alpha)


def tps_from_theta(theta: ThetaVector, control_points=None) -> TPSTransform:
    """TPS moving control point ``k`` by ``alpha * (theta[k], theta[36 + k])``."""
    if theta.kind != "tps":
        raise ParameterShapeError(f"expected tps theta, got {theta.kind}")
    cp = tps_control_points() if control_points is None else np.asarray(control_points, float)
    n = cp.shape[0]
    if theta.values.size != 2 * n:
        raise ParameterShapeError(f"tps theta needs {2 * n} values for {n} control points")
    disp = theta.alpha * np.stack([theta.values[:n], theta.values[n:]], axis=-1)
    return TPSTransform(cp, cp + disp, theta)


def transform_from_theta(theta: ThetaVector) -> Transform2D:
    return affine_from_theta(theta) if theta.kind == "affine" else tps_from_theta(theta)


def compose(affine: Transform2D, tps: Transform2D) -> CompositeTransform:
    """``phi(p) = affine(tps(p))``, so the moving image is resampled once."""
    return CompositeTransform([affine, tps])


def identity_transform() -> AffineTransform:
    return affine_from_theta(ThetaVector.zeros("affine"))


def transform_from_dict(doc: dict) -> Transform2D:
    kind = doc["kind"]
    if kind == "affine":
        return affine_from_theta(ThetaVector(doc["theta"], "affine", doc["alpha"]))
    if kind == "tps":
        theta = ThetaVector(doc["theta"], "tps", doc["alpha"])
        return tps_from_theta(theta, doc.get("control_points"))
    if kind == "bspline":
        return BSplineTransform(doc["coefficients"])
    if kind == "composite":
        return CompositeTransform([transform_from_dict(s) for s in doc["stages"]])
    raise ValueError(f"unknown transform kind {kind!r}")


def transform_from_json(text: str) -> Transform2D:
    return transform_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# sampling and warping


def _snap(pix, tol=1e-9):
    # round-off from the normalized round trip must not split an exact pixel hit
    nearest = np.round(pix)
    return np.where(np.abs(pix - nearest) < tol, nearest, pix)


def sample_bilinear(array: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup at normalized ``points`` with zero padding.

    Points outside ``[-1, 1]^2`` return 0.  ``array`` may carry trailing
    channels.
    """
    h, w = array.shape[:2]
    pix = _snap(normalized_to_pixel(points, (h, w)))
    col, row = pix[..., 0], pix[..., 1]
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    extra = array.shape[2:]
    out = np.zeros(points.shape[:-1] + extra, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = np.where(ok, wr * wc, 0.0)
            vals = array[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
            if extra:
                wgt = wgt.reshape(wgt.shape + (1,) * len(extra))
            out += wgt * vals
    inside = np.all(np.abs(points) <= 1.0, axis=-1)
    if extra:
        inside = inside.reshape(inside.shape + (1,) * len(extra))
    return np.where(inside, out, 0.0)


def sample_nearest(array: np.ndarray, points: np.ndarray) -> np.ndarray:
    h, w = array.shape[:2]
    pix = normalized_to_pixel(points, (h, w))
    col = np.floor(pix[..., 0] + 0.5).astype(np.int64)
    row = np.floor(pix[..., 1] + 0.5).astype(np.int64)
    ok = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    ok &= np.all(np.abs(points) <= 1.0, axis=-1)
    vals = array[np.clip(row, 0, h - 1), np.clip(col, 0, w - 1)]
    if array.ndim > 2:
        ok = ok.reshape(ok.shape + (1,) * (array.ndim - 2))
    return np.where(ok, vals, 0)


def warp_image(
    moving: Image2D,
    transform: Transform2D,
    out_shape: Sequence[int],
    order: str = "linear",
    spacing=None,
) -> Image2D:
    """Backward-warp ``moving`` onto an ``out_shape`` raster.

    ``order`` is ``"linear"`` for intensities or ``"nearest"`` for label
    images.  The output spacing defaults to the moving field of view
    divided by the output size.
    """
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 1 or out_w < 1:
        raise WarpError(f"output shape must be at least 1x1, got {tuple(out_shape)}")
    pts = transform(pixel_centers((out_h, out_w)))
    if not np.all(np.isfinite(pts)):
        raise WarpError("transform produced non-finite coordinates")
    if order == "linear":
        pixels = sample_bilinear(moving.pixels.astype(np.float64, copy=False), pts)
    elif order == "nearest":
        pixels = sample_nearest(moving.pixels, pts)
    else:
        raise ValueError(f"unknown interpolation order {order!r}")
    if spacing is None:
        h, w = moving.shape
        spacing = (moving.spacing[0] * w / out_w, moving.spacing[1] * h / out_h)
    return Image2D(pixels, spacing)


def resample(image: Image2D, out_shape, order: str = "linear") -> Image2D:
    """Resize over the same field of view."""
    return warp_image(image, identity_transform(), out_shape, order=order)


# ---------------------------------------------------------------------------
# plausibility diagnostics


@dataclass
class GridReport:
    image: Image2D
    min_jacobian_det: float
    jacobian_det: np.ndarray = field(repr=False)


def grid_pattern(shape, line_spacing_px: int) -> np.ndarray:
    h, w = shape
    grid = np.zeros((h, w))
    offset = line_spacing_px // 2
    grid[offset::line_spacing_px, :] = 1.0
    grid[:, offset::line_spacing_px] = 1.0
    return grid


def deformed_grid_image(
    transform: Transform2D,
    line_spacing_px: int = 10,
    shape=(240, 240),
    probe_shape=(100, 100),
) -> GridReport:
    """Warp a regular line grid and report the minimum Jacobian determinant."""
    if line_spacing_px < 2:
        raise ValueError("line spacing must be at least 2 px")
    grid = Image2D(grid_pattern(shape, line_spacing_px))
    warped = warp_image(grid, transform, shape)
    det = transform.jacobian_determinant(probe_shape)
    return GridReport(warped, float(det.min()), det)
