"""Synthetic prostate-like images for tests, demos and the CLI smoke run.

Nothing here models real anatomy closely; the shapes are smooth star-convex
blobs with internal texture, which is enough to exercise every code path
with a known ground-truth correspondence.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import (
    Image2D,
    compose,
    pixel_centers,
    sample_bilinear,
    sample_nearest,
    warp_image,
    affine_from_theta,
    tps_from_theta,
)
from .synth import TransformBounds, sample_affine_theta, sample_tps_theta


def blob_mask(rng: np.random.Generator, shape, fill: float = 0.9) -> np.ndarray:
    """Star-convex blob centred in ``shape`` spanning about ``fill`` of it."""
    h, w = shape
    pts = pixel_centers(shape)
    x, y = pts[..., 0] / fill, pts[..., 1] / fill
    r = np.hypot(x, y)
    ang = np.arctan2(y, x)
    radius = 0.85 + np.zeros_like(ang)
    for k in (2, 3, 4):
        radius += rng.uniform(0.0, 0.08) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
    # flatten one side a little, like the posterior prostate surface
    radius *= 1.0 - 0.12 * np.clip(y, 0, None) * rng.uniform(0.3, 1.0)
    return (r <= radius).astype(np.uint8)


def texture(rng: np.random.Generator, shape) -> np.ndarray:
    """Smooth multi-scale texture in ``[0, 1]`` with a few gland-like spots."""
    h, w = shape
    scale = min(h, w) / 120.0
    img = np.zeros(shape)
    for sigma, weight in ((12, 1.0), (5, 0.6), (2, 0.3)):
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma * scale)
        img += weight * layer / (layer.std() + 1e-12)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(4, 8))):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ry, rx = rng.uniform(0.04, 0.1, 2) * np.array([h, w])
        spot = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img += rng.choice([-2.5, 2.5]) * ndimage.gaussian_filter(spot.astype(float), 1.0 * scale)
    img -= img.min()
    return img / img.max()


def canvas_pair(rng: np.random.Generator, shape=(120, 120)):
    """``(mask, masked_intensity)`` canvases as float arrays."""
    mask = blob_mask(rng, shape, fill=rng.uniform(0.85, 0.97)).astype(np.float64)
    return mask, texture(rng, shape) * mask


def canvas_sources(n: int, seed: int, shape=(120, 120)):
    rng = np.random.default_rng(seed)
    pairs = [canvas_pair(rng, shape) for _ in range(n)]
    return [Image2D(m) for m, _ in pairs], [Image2D(t) for _, t in pairs]


def random_composite(rng, bounds: TransformBounds | None = None):
    bounds = bounds or TransformBounds()
    seed = int(rng.integers(2**31))
    return compose(
        affine_from_theta(sample_affine_theta([seed, 0], bounds)),
        tps_from_theta(sample_tps_theta([seed, 1], bounds)),
    )


# ---------------------------------------------------------------------------
# full synthetic cases (native resolution, with labels and landmarks)


def synthetic_case_arrays(rng: np.random.Generator, hist_shape=(180, 210), mri_shape=(96, 96)):
    """Histology-like RGB slice and an MRI-like slice with a known mapping.

    The MRI raster places the prostate in the middle of a larger field of
    view; its content is the histology texture pulled through a random
    composite transform with inverted contrast.
    """
    h, w = hist_shape
    mask = np.zeros(hist_shape, np.uint8)
    pad_r, pad_c = h // 10, w // 10
    inner = (h - 2 * pad_r, w - 2 * pad_c)
    mask[pad_r : pad_r + inner[0], pad_c : pad_c + inner[1]] = blob_mask(rng, inner, fill=0.95)
    tex = texture(rng, hist_shape)
    cancer = np.zeros(hist_shape, np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.35, 0.6) * h, rng.uniform(0.3, 0.7) * w
    cancer[((yy - cy) / (0.12 * h)) ** 2 + ((xx - cx) / (0.1 * w)) ** 2 <= 1] = 1
    cancer &= mask
    urethra = np.zeros(hist_shape, np.uint8)
    uy, ux = 0.45 * h + rng.uniform(-3, 3), 0.5 * w + rng.uniform(-3, 3)
    urethra[((yy - uy) / (0.04 * h)) ** 2 + ((xx - ux) / (0.04 * w)) ** 2 <= 1] = 1
    tex = np.where(urethra > 0, 0.05, tex)
    pink = np.array([0.93, 0.55, 0.75])
    purple = np.array([0.45, 0.2, 0.55])
    rgb = pink[None, None] * (1 - tex[..., None]) + purple[None, None] * tex[..., None]
    rgb = np.where(mask[..., None] > 0, rgb, 1.0)
    hist_rgb = np.round(rgb * 255).astype(np.uint8)

    # MRI: prostate occupies the central ~55% of the field of view
    phi = random_composite(rng)
    mh, mw = mri_shape
    frac = 0.55
    pts = pixel_centers(mri_shape) / frac
    inside = np.all(np.abs(pts) <= 1.0, axis=-1)
    src = phi(pts)
    # map the MRI box onto the histology mask bounding box
    rows, cols = np.flatnonzero(mask.any(1)), np.flatnonzero(mask.any(0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    scale = np.array([(c1 - c0) / w, (r1 - r0) / h])
    centre = np.array([(c0 + c1) / w - 1.0, (r0 + r1) / h - 1.0])
    src_full = src * scale + centre
    mri_mask = (sample_nearest(mask, src_full) > 0) & inside
    mri_tex = sample_bilinear(tex, src_full) * inside
    mri = np.where(mri_mask, 0.85 - 0.6 * mri_tex, 0.15)
    mri = mri + 0.03 * rng.standard_normal(mri_shape)
    mri_u16 = np.round(np.clip(mri, 0, 1) * 4000).astype(np.uint16)
    mri_urethra = ((sample_nearest(urethra, src_full) > 0) & inside).astype(np.uint8)

    # landmarks: pick MRI points inside the prostate and map them exactly
    fg = np.argwhere(mri_mask)
    pick = fg[rng.choice(len(fg), size=3, replace=False)]
    landmarks = []
    for r, c in pick:
        p_norm = pixel_centers(mri_shape)[r, c]
        q_norm = phi(p_norm / frac) * scale + centre
        q_px = ((q_norm + 1.0) * np.array([w, h])) / 2.0
        p_px = np.array([c + 0.5, r + 0.5])
        landmarks.append((p_px, q_px))
    return {
        "hist": hist_rgb,
        "hist_mask": mask,
        "cancer": cancer,
        "urethra": urethra,
        "mri": mri_u16,
        "mri_mask": mri_mask.astype(np.uint8),
        "mri_urethra": mri_urethra,
        "landmarks_px": landmarks,
    }


def write_synthetic_cohort(
    directory,
    n_patients: int = 2,
    slices_per_patient: int = 2,
    seed: int = 0,
    hist_spacing: float = 0.05,
    mri_spacing: float = 0.4,
) -> Path:
    """Write PNG images and a ``manifest.json``; returns the manifest path."""
    from PIL import Image

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    patients = []
    for p in range(n_patients):
        slices = []
        for s in range(slices_per_patient):
            arr = synthetic_case_arrays(rng)
            stem = f"p{p:02d}_s{s:02d}"
            files = {
                "hist_path": (f"{stem}_hist.png", arr["hist"]),
                "hist_mask_path": (f"{stem}_hist_mask.png", arr["hist_mask"] * 255),
                "mri_path": (f"{stem}_mri.png", arr["mri"]),
                "mri_mask_path": (f"{stem}_mri_mask.png", arr["mri_mask"] * 255),
            }
            entry = {}
            for key, (name, data) in files.items():
                Image.fromarray(np.ascontiguousarray(data)).save(root / name)
                entry[key] = name
            labels = {}
            for lab in ("cancer", "urethra"):
                name = f"{stem}_{lab}.png"
                Image.fromarray(arr[lab] * 255).save(root / name)
                labels[lab] = name
            name = f"{stem}_mri_urethra.png"
            Image.fromarray(arr["mri_urethra"] * 255).save(root / name)
            entry["label_paths"] = labels
            entry["mri_label_paths"] = {"urethra": name}
            entry["landmarks"] = [
                {
                    "p_mri_mm": [float(v) for v in pm * mri_spacing],
                    "p_hist_mm": [float(v) for v in ph * hist_spacing],
                }
                for pm, ph in arr["landmarks_px"]
            ]
            entry.update(
                {
                    "slice_id": stem,
                    "rotation_deg": 0.0,
                    "hflip": False,
                    "mri_spacing_mm": [mri_spacing, mri_spacing],
                    "hist_spacing_mm": [hist_spacing, hist_spacing],
                }
            )
            slices.append(entry)
        patients.append({"patient_id": f"p{p:02d}", "slices": slices})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"root": ".", "patients": patients}, indent=1, sort_keys=True))
    return manifest
