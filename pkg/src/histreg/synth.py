"""Synthetic uni-modal training tuples with known transforms.

Each tuple is ``(moving, fixed, theta)`` where ``fixed`` is ``moving``
backward-warped by the transform encoded in ``theta``.  A network trained to
reproduce ``theta`` from the pair therefore predicts the grid that resamples
the moving image onto the fixed one.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    DEFAULT_ALPHA,
    Image2D,
    ThetaVector,
    theta_from_affine,
    transform_from_theta,
    warp_image,
)


@dataclass(frozen=True)
class TransformBounds:
    """Sampling intervals; fractions are relative to the image size."""

    rot_deg: tuple[float, float] = (-10.0, 10.0)
    scale: tuple[float, float] = (0.8, 1.2)
    shift_frac: float = 0.05
    shear_frac: float = 0.05
    tps_disp_frac: float = 0.05

    def __post_init__(self):
        for name in ("rot_deg", "scale"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is empty: {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale[0] <= 0:
            raise ValueError("scale bounds must be positive")
        for name in ("shift_frac", "shear_frac", "tps_disp_frac"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")

    @classmethod
    def identity(cls) -> "TransformBounds":
        return cls((0.0, 0.0), (1.0, 1.0), 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffineFactors:
    rotation_deg: float
    scale_x: float
    scale_y: float
    shear: float
    shift_x: float
    shift_y: float


def affine_matrix(f: AffineFactors) -> tuple[np.ndarray, np.ndarray]:
    """``rotation @ shear @ scale`` plus translation, in normalized units."""
    a = np.deg2rad(f.rotation_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    shear = np.array([[1.0, f.shear], [0.0, 1.0]])
    scale = np.diag([f.scale_x, f.scale_y])
    return rot @ shear @ scale, np.array([f.shift_x, f.shift_y])


def decompose_affine(matrix, offset) -> AffineFactors:
    """Inverse of :func:`affine_matrix` (QR with a positive triangular factor)."""
    m = np.asarray(matrix, dtype=np.float64)
    angle = np.arctan2(m[1, 0], m[0, 0])
    c, s = np.cos(angle), np.sin(angle)
    upper = np.array([[c, s], [-s, c]]) @ m
    sx, sy = upper[0, 0], upper[1, 1]
    return AffineFactors(
        float(np.rad2deg(angle)), float(sx), float(sy), float(upper[0, 1] / sy),
        float(offset[0]), float(offset[1]),
    )


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_affine_factors(seed, bounds: TransformBounds) -> AffineFactors:
    rng = _rng(seed)
    shift = 2.0 * bounds.shift_frac
    return AffineFactors(
        rotation_deg=float(rng.uniform(*bounds.rot_deg)),
        scale_x=float(rng.uniform(*bounds.scale)),
        scale_y=float(rng.uniform(*bounds.scale)),
        shear=float(rng.uniform(-bounds.shear_frac, bounds.shear_frac)),
        shift_x=float(rng.uniform(-shift, shift)),
        shift_y=float(rng.uniform(-shift, shift)),
    )


def sample_affine_theta(seed, bounds: TransformBounds, alpha: float = DEFAULT_ALPHA) -> ThetaVector:
    matrix, offset = affine_matrix(sample_affine_factors(seed, bounds))
    return theta_from_affine(matrix, offset, alpha)


def sample_tps_theta(seed, bounds: TransformBounds, alpha: float = DEFAULT_ALPHA) -> ThetaVector:
    """Uniform control-point displacements, already divided by ``alpha``."""
    rng = _rng(seed)
    amp = 2.0 * bounds.tps_disp_frac
    return ThetaVector(rng.uniform(-amp, amp, 72) / alpha, "tps", alpha)


def sample_theta(kind: str, seed, bounds: TransformBounds, alpha: float = DEFAULT_ALPHA) -> ThetaVector:
    if kind == "affine":
        return sample_affine_theta(seed, bounds, alpha)
    if kind == "tps":
        return sample_tps_theta(seed, bounds, alpha)
    raise ValueError(f"unknown stage kind {kind!r}")


@dataclass
class TrainingTuple:
    moving: Image2D
    fixed: Image2D
    theta_gt: ThetaVector
    seed: tuple[int, int, int]
    source: int = 0


def make_pair(moving: Image2D, theta: ThetaVector) -> Image2D:
    return warp_image(moving, transform_from_theta(theta), moving.shape)


def make_training_set(
    images: Sequence[Image2D],
    n_per_image: int,
    kind: str,
    rng_seed: int,
    bounds: TransformBounds | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> list[TrainingTuple]:
    """Draw ``n_per_image`` transforms per source image.

    Draw ``j`` of image ``i`` uses the stream ``default_rng([seed, i, j])``,
    so any subset can be regenerated independently of the rest.
    """
    if not images:
        raise ValueError("no source images")
    bounds = TransformBounds() if bounds is None else bounds
    out = []
    for i, img in enumerate(images):
        for j in range(n_per_image):
            seed = (int(rng_seed), i, j)
            theta = sample_theta(kind, list(seed), bounds, alpha)
            out.append(TrainingTuple(img, make_pair(img, theta), theta, seed, i))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_training_set(tuples: Sequence[TrainingTuple], directory, provenance: dict | None = None):
    """Write sources and fixed images as ``.npy`` plus an ``index.json``."""
    root = Path(directory)
    (root / "sources").mkdir(parents=True, exist_ok=True)
    (root / "fixed").mkdir(parents=True, exist_ok=True)
    written = set()
    entries = []
    for n, t in enumerate(tuples):
        if t.source not in written:
            np.save(root / "sources" / f"{t.source:05d}.npy", t.moving.pixels)
            written.add(t.source)
        np.save(root / "fixed" / f"{n:06d}.npy", t.fixed.pixels)
        entries.append(
            {
                "source": t.source,
                "fixed": f"fixed/{n:06d}.npy",
                "kind": t.theta_gt.kind,
                "alpha": t.theta_gt.alpha,
                "theta": t.theta_gt.values.tolist(),
                "seed": list(t.seed),
            }
        )
    index = {"tuples": entries, "provenance": provenance or {}}
    tmp = root / "index.json.tmp"
    tmp.write_text(json.dumps(index, indent=1, sort_keys=True))
    os.replace(tmp, root / "index.json")


def load_training_set(directory) -> list[TrainingTuple]:
    root = Path(directory)
    index = json.loads((root / "index.json").read_text())
    sources = {}
    out = []
    for e in index["tuples"]:
        src = e["source"]
        if src not in sources:
            sources[src] = Image2D(np.load(root / "sources" / f"{src:05d}.npy"))
        theta = ThetaVector(e["theta"], e["kind"], e["alpha"])
        fixed = Image2D(np.load(root / e["fixed"]))
        out.append(TrainingTuple(sources[src], fixed, theta, tuple(e["seed"]), src))
    return out


def bounds_to_dict(bounds: TransformBounds) -> dict:
    return asdict(bounds)
