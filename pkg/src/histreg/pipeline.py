"""Two-stage inference, full-resolution warping and evaluation of one slice.

Histopathology is the moving image and the MRI slice is fixed.  Every
transform maps normalized coordinates of the fixed crop to normalized
coordinates of the moving crop, so the same map applies at any raster
size.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import grids
from .geometry import (
    Image2D,
    Transform2D,
    compose,
    transform_from_theta,
    warp_image,
)
from .matchnet import MatchNet, StageMismatchError, as_batch, predict_theta
from .metrics import (
    MetricReport,
    UndefinedMetricError,
    centroid_mm,
    dice,
    hausdorff_mm,
    landmark_error,
)
from .preprocess import CasePair, PreparedCase, prepare_case


class MissingMaskError(ValueError):
    pass


@dataclass
class RegistrationResult:
    """Outcome of registering one histopathology slice to its MRI slice.

    ``composite`` maps the fixed (MRI) crop onto the moving (histology)
    crop.  For the iterative backend ``tps`` holds the B-spline stage.
    """

    affine: Transform2D
    tps: Transform2D
    composite: Transform2D
    warped_hist: Image2D
    warped_labels: dict[str, Image2D]
    wall_time_s: float
    stage_times_s: dict[str, float] = field(default_factory=dict)
    forward_passes: int = 0
    warped_mask: Image2D | None = None
    prepared: PreparedCase | None = field(default=None, repr=False)
    backend: str = "network"

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "affine": self.affine.to_dict(),
            "tps": self.tps.to_dict(),
            "composite": self.composite.to_dict(),
            "forward_passes": self.forward_passes,
            "warped_hist_shape": list(self.warped_hist.shape),
            "warped_hist_spacing_mm": list(self.warped_hist.spacing),
            "labels": sorted(self.warped_labels),
        }

    def timing(self) -> dict:
        return {"wall_time_s": self.wall_time_s, **{f"{k}_s": v for k, v in self.stage_times_s.items()}}


# ---------------------------------------------------------------------------
# geometry helpers


def native_shape(fov_source: Image2D, spacing) -> tuple[int, int]:
    """Raster covering ``fov_source``'s field of view at ``spacing``."""
    h, w = fov_source.shape
    sx, sy = fov_source.spacing
    return max(1, int(round(w * sx / spacing[0]))), max(1, int(round(h * sy / spacing[1])))


def _native_geometry(target: Image2D, spacing):
    h, w = target.shape
    sx, sy = target.spacing
    out_w, out_h = native_shape(target, spacing)
    return (out_h, out_w), (w * sx / out_w, h * sy / out_h)


def map_labels(labels, composite: Transform2D, target_geometry: Image2D, native: bool = True):
    """Warp binary label rasters into the fixed-slice frame.

    With ``native`` the output keeps the labels' own pixel size while
    covering the target field of view; otherwise it uses the target raster.
    Accepts a single :class:`Image2D` or a name-to-image mapping.
    """
    single = isinstance(labels, Image2D)
    items = {"label": labels} if single else dict(labels)
    if not items:
        return items
    ref = next(iter(items.values()))
    for name, lab in items.items():
        if lab.shape != ref.shape or lab.spacing != ref.spacing:
            raise ValueError(f"label {name!r} does not share the geometry of the other labels")
        if lab.pixels.ndim != 2:
            raise ValueError(f"label {name!r} is not a single-channel raster")
    if min(target_geometry.spacing) <= 0:
        raise ValueError("target geometry needs positive spacing")
    if native:
        shape, spacing = _native_geometry(target_geometry, ref.spacing)
    else:
        shape, spacing = target_geometry.shape, target_geometry.spacing
    out = {
        name: Image2D(
            (warp_image(lab, composite, shape, order="nearest").pixels > 0).astype(np.uint8),
            spacing,
        )
        for name, lab in items.items()
    }
    return out["label"] if single else out


def postprocess(warped: Image2D, fixed_mask: Image2D) -> Image2D:
    """Zero everything outside the fixed prostate mask."""
    if warped.shape != fixed_mask.shape:
        raise ValueError(f"shapes differ: {warped.shape} vs {fixed_mask.shape}")
    keep = fixed_mask.pixels > 0
    if warped.pixels.ndim == 3:
        keep = keep[..., None]
    return warped.replace(pixels=np.where(keep, warped.pixels, 0).astype(warped.pixels.dtype))


def mm_to_normalized(points_mm, crop: Image2D) -> np.ndarray:
    """Oriented-frame mm coordinates to normalized coordinates of ``crop``."""
    p = np.asarray(points_mm, dtype=np.float64)
    sx, sy = crop.spacing
    r0, c0 = crop.origin
    h, w = crop.shape
    col = p[..., 0] / sx - c0
    row = p[..., 1] / sy - r0
    return np.stack([2.0 * col / w - 1.0, 2.0 * row / h - 1.0], axis=-1)


def normalized_to_mm(points, crop: Image2D) -> np.ndarray:
    q = np.asarray(points, dtype=np.float64)
    sx, sy = crop.spacing
    r0, c0 = crop.origin
    h, w = crop.shape
    col = (q[..., 0] + 1.0) * w / 2.0 + c0
    row = (q[..., 1] + 1.0) * h / 2.0 + r0
    return np.stack([col * sx, row * sy], axis=-1)


# ---------------------------------------------------------------------------
# registration


def _check_models(affine_model: MatchNet, tps_model: MatchNet):
    if affine_model.kind != "affine":
        raise StageMismatchError(f"first stage needs an affine model, got {affine_model.kind}")
    if tps_model.kind != "tps":
        raise StageMismatchError(f"second stage needs a tps model, got {tps_model.kind}")
    if affine_model.cfg.canvas != tps_model.cfg.canvas:
        raise StageMismatchError("the two stage models were trained on different canvas sizes")


def _require_masks(case: CasePair):
    for name in ("hist_mask", "mri_mask"):
        m = getattr(case, name, None)
        if m is None or not np.any(m.pixels):
            raise MissingMaskError(f"case {case.slice_id!r} has no usable {name}")


def register_canvases(moving_mask, moving, fixed_mask, fixed, affine_model: MatchNet, tps_model: MatchNet):
    """Both forward passes on canvas arrays; returns ``(affine, tps, stage_times)``."""
    _check_models(affine_model, tps_model)
    times = {}
    t0 = time.perf_counter()
    theta_a = predict_theta(affine_model, moving_mask, fixed_mask)
    times["affine"] = time.perf_counter() - t0
    affine = transform_from_theta(theta_a)

    t0 = time.perf_counter()
    with torch.no_grad():
        batch = as_batch(moving)
        grid = grids.affine_grid(
            torch.as_tensor(theta_a.values, dtype=torch.float32)[None], theta_a.alpha, batch.shape[-2:]
        )
        prewarped = grids.warp(batch, grid)[0, 0].numpy()
    times["prewarp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    theta_t = predict_theta(tps_model, prewarped, fixed)
    times["tps"] = time.perf_counter() - t0
    return affine, transform_from_theta(theta_t), times


def network_stages(prepared: PreparedCase, affine_model: MatchNet, tps_model: MatchNet):
    return register_canvases(
        prepared.moving_mask_canvas, prepared.moving_canvas,
        prepared.fixed_mask_canvas, prepared.fixed_canvas,
        affine_model, tps_model,
    )


def _finish(prepared: PreparedCase, affine, second, times, start, backend, passes) -> RegistrationResult:
    composite = compose(affine, second)
    t0 = time.perf_counter()
    hist = prepared.hist_crop
    shape, spacing = _native_geometry(prepared.mri_crop, hist.spacing)
    warped = warp_image(hist, composite, shape, order="linear", spacing=spacing)
    if np.issubdtype(hist.pixels.dtype, np.integer):
        warped = warped.replace(pixels=np.clip(np.round(warped.pixels), 0, np.iinfo(hist.pixels.dtype).max)
                                .astype(hist.pixels.dtype))
    labels = map_labels(prepared.hist_label_crops, composite, prepared.mri_crop)
    mask = map_labels(prepared.hist_mask_crop, composite, prepared.mri_crop, native=False)
    times["apply"] = time.perf_counter() - t0
    return RegistrationResult(
        affine=affine,
        tps=second,
        composite=composite,
        warped_hist=warped,
        warped_labels=labels,
        wall_time_s=time.perf_counter() - start,
        stage_times_s=times,
        forward_passes=passes,
        warped_mask=mask,
        prepared=prepared,
        backend=backend,
    )


def register_pair(case: CasePair, affine_model: MatchNet, tps_model: MatchNet,
                  prepared: PreparedCase | None = None) -> RegistrationResult:
    """Affine network on the masks, then the TPS network on the affine-prewarped image."""
    start = time.perf_counter()
    _require_masks(case)
    _check_models(affine_model, tps_model)
    if prepared is None:
        prepared = prepare_case(case, canvas=affine_model.cfg.canvas)
    calls = affine_model.forward_calls + tps_model.forward_calls
    affine, tps, times = network_stages(prepared, affine_model, tps_model)
    passes = affine_model.forward_calls + tps_model.forward_calls - calls
    return _finish(prepared, affine, tps, times, start, "network", passes)


def register_pair_iterative(case: CasePair, cfg=None, canvas=(120, 120),
                            prepared: PreparedCase | None = None) -> RegistrationResult:
    """Same interface with the iterative mask-SSD plus MI free-form backend."""
    from .baseline import IterativeConfig, affine_register_masks, deformable_register_mi

    start = time.perf_counter()
    _require_masks(case)
    cfg = cfg or IterativeConfig()
    if prepared is None:
        prepared = prepare_case(case, canvas=canvas)
    times = {}
    t0 = time.perf_counter()
    affine = affine_register_masks(prepared.moving_mask_canvas, prepared.fixed_mask_canvas, cfg)
    times["affine"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    _, ffd = deformable_register_mi(prepared.moving_canvas, prepared.fixed_canvas, affine, cfg)
    times["deformable"] = time.perf_counter() - t0
    return _finish(prepared, affine, ffd, times, start, "baseline", 0)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_result(result: RegistrationResult) -> MetricReport:
    """Slice metrics in the fixed (MRI) crop, distances in mm."""
    prep = result.prepared
    case = prep.case
    report = MetricReport(patient=case.patient, slice_id=case.slice_id, time_s=result.wall_time_s)
    fixed_mask = prep.mri_mask_crop
    warped_mask = result.warped_mask
    try:
        report.dice = dice(warped_mask.pixels, fixed_mask.pixels)
        report.hausdorff_mm = hausdorff_mm(warped_mask.pixels, fixed_mask.pixels, fixed_mask.spacing)
    except UndefinedMetricError:
        pass
    if "urethra" in prep.hist_label_crops and "urethra" in prep.mri_label_crops:
        warped_u = map_labels(prep.hist_label_crops["urethra"], result.composite, prep.mri_crop, native=False)
        try:
            a = centroid_mm(warped_u.pixels, prep.mri_crop.spacing)
            b = centroid_mm(prep.mri_label_crops["urethra"].pixels, prep.mri_crop.spacing)
            report.urethra_dev_mm = float(np.linalg.norm(a - b))
        except UndefinedMetricError:
            pass
    if case.landmarks:
        def phi_mm(p_mri_mm):
            q = result.composite(mm_to_normalized(p_mri_mm, prep.mri_crop))
            return normalized_to_mm(q, prep.hist_crop)

        report.landmark_err_mm = landmark_error(case.landmarks, phi_mm)
    return report


# ---------------------------------------------------------------------------
# outputs


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    hi = arr.max()
    if np.issubdtype(np.asarray(pixels).dtype, np.integer) and hi <= 255:
        return np.asarray(pixels).astype(np.uint8)
    return np.round(255.0 * arr / hi if hi > 0 else arr).astype(np.uint8)


def overlay_image(fixed: np.ndarray, warped: np.ndarray, labels: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """``fixed | warped | blend`` panel as RGB, label contours drawn in colour.

    Small rasters are enlarged by pixel replication for viewing.
    """
    from .metrics import boundary

    scale = max(1, 256 // max(1, min(np.shape(fixed)[:2])))

    def up(a):
        return np.repeat(np.repeat(np.asarray(a), scale, axis=0), scale, axis=1)

    f = up(_to_uint8(fixed))
    w = up(_to_uint8(warped))
    f = np.repeat(f[..., None], 3, axis=2) if f.ndim == 2 else f
    w = np.repeat(w[..., None], 3, axis=2) if w.ndim == 2 else w
    blend = ((f.astype(np.uint16) + w.astype(np.uint16)) // 2).astype(np.uint8)
    colours = [(255, 40, 40), (40, 220, 40), (60, 120, 255), (240, 200, 0)]
    for k, (name, lab) in enumerate(sorted((labels or {}).items())):
        edge = boundary(up(lab))
        for panel in (w, blend):
            panel[edge] = colours[k % len(colours)]
    return np.concatenate([f, w, blend], axis=1)


def save_result(result: RegistrationResult, directory, stem: str) -> dict:
    """Write JSON, warped images and an overlay; returns the written paths."""
    from PIL import Image

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    prep = result.prepared
    paths = {"json": root / f"{stem}.json", "warped": root / f"{stem}_warped_hist.png",
             "overlay": root / f"{stem}_overlay.png"}
    doc = result.to_dict()
    doc["patient"] = prep.case.patient if prep else ""
    doc["slice_id"] = prep.case.slice_id if prep else stem
    paths["json"].write_text(json.dumps(doc, indent=1, sort_keys=True))
    Image.fromarray(_to_uint8(result.warped_hist.pixels)).save(paths["warped"])
    for name, lab in result.warped_labels.items():
        p = root / f"{stem}_label_{name}.png"
        Image.fromarray((lab.pixels > 0).astype(np.uint8) * 255).save(p)
        paths[f"label_{name}"] = p
    if prep is not None:
        shape = prep.mri_crop.shape
        warped_small = warp_image(prep.hist_crop, result.composite, shape)
        warped_small = postprocess(warped_small, prep.mri_mask_crop)
        labels = {k: map_labels(v, result.composite, prep.mri_crop, native=False).pixels
                  for k, v in prep.hist_label_crops.items()}
        fixed = prep.mri_crop.pixels
        if fixed.ndim == 3:
            fixed = fixed.mean(axis=2)
        Image.fromarray(overlay_image(fixed, warped_small.pixels, labels)).save(paths["overlay"])
    return {k: str(v) for k, v in paths.items()}

