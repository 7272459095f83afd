"""Orientation correction, cropping, normalization and canvas resampling.

Landmarks and other points are given in mm measured from the top-left
corner of the raster, so pixel ``(row, col)`` has its centre at
``((col + 0.5) * sx, (row + 0.5) * sy)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import Image2D, resample

CANVAS = (240, 240)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class OrientationConfig:
    rotation_deg: float = 0.0
    hflip: bool = False

    def __post_init__(self):
        if not -180.0 <= self.rotation_deg <= 180.0:
            raise ValueError(f"rotation must lie in [-180, 180], got {self.rotation_deg}")


@dataclass
class CasePair:
    """One histopathology slice and its corresponding MRI slice.

    ``landmarks`` holds ``(p_mri_mm, p_hist_mm)`` pairs.  ``mri_labels`` is
    optional and only used for evaluation (e.g. the urethra on MRI).
    """

    hist_image: Image2D
    hist_mask: Image2D
    mri_slice: Image2D
    mri_mask: Image2D
    hist_labels: dict[str, Image2D] = field(default_factory=dict)
    mri_labels: dict[str, Image2D] = field(default_factory=dict)
    landmarks: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    orientation: OrientationConfig = field(default_factory=OrientationConfig)
    patient: str = ""
    slice_id: str = ""

    def validate(self):
        for name, mask in (("hist_mask", self.hist_mask), ("mri_mask", self.mri_mask)):
            if not np.any(mask.pixels):
                raise DegenerateInputError(f"{name} is empty")
            if not np.all(np.isin(mask.pixels, (0, 1))):
                raise ValueError(f"{name} is not binary")
        if self.hist_mask.shape != self.hist_image.shape:
            raise ValueError("hist_mask shape differs from hist_image")
        if self.mri_mask.shape != self.mri_slice.shape:
            raise ValueError("mri_mask shape differs from mri_slice")
        for name, lab in self.hist_labels.items():
            if lab.shape != self.hist_image.shape:
                raise ValueError(f"label {name!r} shape differs from hist_image")
        for name, lab in self.mri_labels.items():
            if lab.shape != self.mri_slice.shape:
                raise ValueError(f"MRI label {name!r} shape differs from mri_slice")


# ---------------------------------------------------------------------------
# orientation


def _rotation_shape(shape, angle_deg):
    h, w = shape
    a = np.deg2rad(angle_deg)
    c, s = abs(np.cos(a)), abs(np.sin(a))
    return int(round(s * w + c * h)), int(round(c * w + s * h))


def rotate_array(array: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Counter-clockwise rotation about the centre with an expanded canvas.

    Multiples of 90 degrees are exact index permutations.
    """
    quarter = angle_deg / 90.0
    if quarter == round(quarter):
        return np.rot90(array, int(round(quarter)) % 4, axes=(0, 1)).copy()
    h, w = array.shape[:2]
    oh, ow = _rotation_shape((h, w), angle_deg)
    a = np.deg2rad(angle_deg)
    cos, sin = np.cos(a), np.sin(a)
    matrix = np.array([[cos, sin], [-sin, cos]])
    # output index (r', c') -> input index (r, c)
    out_c = np.array([oh / 2 - 0.5, ow / 2 - 0.5])
    in_c = np.array([h / 2 - 0.5, w / 2 - 0.5])
    offset = in_c - matrix @ out_c

    def one(channel):
        return ndimage.affine_transform(
            channel, matrix, offset, output_shape=(oh, ow), order=order, mode="constant", cval=0.0
        )

    if array.ndim == 2:
        return one(array.astype(np.float64))
    return np.stack([one(array[..., k].astype(np.float64)) for k in range(array.shape[2])], -1)


def rotate_points_px(points, shape, angle_deg):
    """Map continuous ``(u, v)`` pixel coordinates (corner origin) through the rotation."""
    points = np.asarray(points, dtype=np.float64)
    h, w = shape
    oh, ow = _rotation_shape(shape, angle_deg)
    a = np.deg2rad(angle_deg)
    dx = points[..., 0] - w / 2
    dy = points[..., 1] - h / 2
    nx = np.cos(a) * dx + np.sin(a) * dy
    ny = -np.sin(a) * dx + np.cos(a) * dy
    return np.stack([nx + ow / 2, ny + oh / 2], axis=-1)


def _orient_image(img: Image2D, cfg: OrientationConfig, order: int) -> Image2D:
    pixels = img.pixels
    spacing = img.spacing
    if cfg.rotation_deg != 0:
        quarter = cfg.rotation_deg / 90.0
        if quarter != round(quarter) and not np.isclose(spacing[0], spacing[1]):
            raise ValueError("non right-angle rotation needs isotropic spacing")
        pixels = rotate_array(pixels, cfg.rotation_deg, order)
        if quarter == round(quarter) and int(round(quarter)) % 2:
            spacing = (spacing[1], spacing[0])
        if order == 0:
            pixels = pixels.astype(img.pixels.dtype)
    if cfg.hflip:
        pixels = pixels[:, ::-1].copy()
    return Image2D(pixels, spacing)


def orient_points_mm(points_mm, image: Image2D, cfg: OrientationConfig) -> np.ndarray:
    """Apply the same rotation and flip to points given in mm."""
    pts = np.asarray(points_mm, dtype=np.float64)
    sx, sy = image.spacing
    px = np.stack([pts[..., 0] / sx, pts[..., 1] / sy], axis=-1)
    shape = image.shape
    if cfg.rotation_deg != 0:
        px = rotate_points_px(px, shape, cfg.rotation_deg)
        shape = _rotation_shape(shape, cfg.rotation_deg)
        quarter = cfg.rotation_deg / 90.0
        if quarter == round(quarter) and int(round(quarter)) % 2:
            sx, sy = sy, sx
    if cfg.hflip:
        px = np.stack([shape[1] - px[..., 0], px[..., 1]], axis=-1)
    return np.stack([px[..., 0] * sx, px[..., 1] * sy], axis=-1)


def apply_orientation(case: CasePair) -> CasePair:
    """Rotate and optionally flip every histopathology raster and landmark."""
    cfg = case.orientation
    if cfg.rotation_deg == 0 and not cfg.hflip:
        return case
    landmarks = [
        (np.asarray(p), orient_points_mm(q, case.hist_image, cfg)) for p, q in case.landmarks
    ]
    return replace(
        case,
        hist_image=_orient_image(case.hist_image, cfg, order=1),
        hist_mask=_orient_image(case.hist_mask, cfg, order=0),
        hist_labels={k: _orient_image(v, cfg, order=0) for k, v in case.hist_labels.items()},
        landmarks=landmarks,
        orientation=OrientationConfig(),
    )


# ---------------------------------------------------------------------------
# crop / normalize / resample


def mask_bbox(mask: np.ndarray, margin_px: int = 0) -> tuple[int, int, int, int]:
    """``(r0, r1, c0, c1)`` half-open bounds of the foreground plus margin."""
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if rows.size == 0:
        raise DegenerateInputError("mask is empty")
    h, w = mask.shape[:2]
    r0 = max(rows[0] - margin_px, 0)
    r1 = min(rows[-1] + 1 + margin_px, h)
    c0 = max(cols[0] - margin_px, 0)
    c1 = min(cols[-1] + 1 + margin_px, w)
    return int(r0), int(r1), int(c0), int(c1)


def crop_to_mask_bbox(image: Image2D, mask: Image2D, margin_px: int = 0):
    """Crop ``image`` and ``mask`` to the mask's bounding box.

    The returned rasters carry the crop offset in ``origin``.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    r0, r1, c0, c1 = mask_bbox(mask.pixels, margin_px)
    origin = (image.origin[0] + r0, image.origin[1] + c0)
    return (
        Image2D(image.pixels[r0:r1, c0:c1].copy(), image.spacing, origin),
        Image2D(mask.pixels[r0:r1, c0:c1].copy(), mask.spacing, origin),
    )


def normalize_intensity(image: Image2D) -> Image2D:
    """Min-max rescale to ``[0, 255]``; a constant image becomes all zeros."""
    if image.channels != 1:
        raise ValueError("intensity normalization expects a single-channel image")
    pix = image.pixels.astype(np.float64)
    lo, hi = pix.min(), pix.max()
    if hi == lo:
        return image.replace(pixels=np.zeros_like(pix))
    return image.replace(pixels=(pix - lo) * (255.0 / (hi - lo)))


def apply_mask(image: Image2D, mask: Image2D) -> Image2D:
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    m = (mask.pixels > 0).astype(np.float64)
    if image.channels > 1:
        m = m[..., None]
    return image.replace(pixels=image.pixels.astype(np.float64) * m)


def mask_and_resample(image: Image2D, mask: Image2D, canvas=CANVAS) -> Image2D:
    """Zero everything outside the mask, then bilinearly resample to ``canvas``."""
    return resample(apply_mask(image, mask), canvas)


def to_gray(image: Image2D) -> Image2D:
    if image.channels == 1:
        return image
    pix = image.pixels[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return image.replace(pixels=pix)


# ---------------------------------------------------------------------------
# whole-case preparation


@dataclass
class PreparedCase:
    """Network canvases plus the native-resolution crops they came from.

    Canvas intensities are scaled to ``[0, 1]``; masks are ``{0, 1}``.
    """

    case: CasePair
    hist_crop: Image2D
    hist_mask_crop: Image2D
    hist_label_crops: dict[str, Image2D]
    mri_crop: Image2D
    mri_mask_crop: Image2D
    mri_label_crops: dict[str, Image2D]
    moving_canvas: np.ndarray
    moving_mask_canvas: np.ndarray
    fixed_canvas: np.ndarray
    fixed_mask_canvas: np.ndarray


def prepare_case(case: CasePair, canvas=CANVAS, margin_px: int = 0) -> PreparedCase:
    """Orientation, crop, normalization, masking and canvas resampling."""
    case.validate()
    oriented = apply_orientation(case)
    hist_crop, hist_mask_crop = crop_to_mask_bbox(oriented.hist_image, oriented.hist_mask, margin_px)
    r0, c0 = hist_crop.origin
    h, w = hist_crop.shape
    hist_labels = {
        k: Image2D(v.pixels[r0 : r0 + h, c0 : c0 + w].copy(), v.spacing, (r0, c0))
        for k, v in oriented.hist_labels.items()
    }
    mri_crop, mri_mask_crop = crop_to_mask_bbox(oriented.mri_slice, oriented.mri_mask, margin_px)
    mr0, mc0 = mri_crop.origin
    mh, mw = mri_crop.shape
    mri_labels = {
        k: Image2D(v.pixels[mr0 : mr0 + mh, mc0 : mc0 + mw].copy(), v.spacing, (mr0, mc0))
        for k, v in oriented.mri_labels.items()
    }
    mri_norm = normalize_intensity(to_gray(mri_crop))
    hist_gray = normalize_intensity(to_gray(hist_crop))
    moving = mask_and_resample(hist_gray, hist_mask_crop, canvas).pixels / 255.0
    fixed = mask_and_resample(mri_norm, mri_mask_crop, canvas).pixels / 255.0
    moving_mask = resample(hist_mask_crop, canvas, order="nearest").pixels.astype(np.float64)
    fixed_mask = resample(mri_mask_crop, canvas, order="nearest").pixels.astype(np.float64)
    return PreparedCase(
        oriented,
        hist_crop,
        hist_mask_crop,
        hist_labels,
        mri_crop,
        mri_mask_crop,
        mri_labels,
        moving,
        moving_mask,
        fixed,
        fixed_mask,
    )
