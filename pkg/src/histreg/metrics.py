"""Overlap, boundary and landmark metrics with per-patient aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Image2D

_CROSS = ndimage.generate_binary_structure(2, 1)

METRICS = ("dice", "hausdorff_mm", "urethra_dev_mm", "landmark_err_mm", "time_s")


class UndefinedMetricError(ValueError):
    pass


def _binary(mask) -> np.ndarray:
    arr = mask.pixels if isinstance(mask, Image2D) else np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {arr.shape}")
    return arr > 0


def dice(m_a, m_b) -> float:
    """``2 |A & B| / (|A| + |B|)``."""
    a, b = _binary(m_a), _binary(m_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise UndefinedMetricError("Dice is undefined for two empty masks")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background.

    Pixels on the raster edge count as boundary.
    """
    m = _binary(mask)
    return m & ~ndimage.binary_erosion(m, _CROSS, border_value=0)


def _directed_sq(src: np.ndarray, dst: np.ndarray, spacing, chunk: int = 2048) -> float:
    """``max_a min_b |a - b|^2`` with points given as ``(row, col)`` indices."""
    sx, sy = spacing
    dst_r = dst[:, 0].astype(np.float64)
    dst_c = dst[:, 1].astype(np.float64)
    worst = 0.0
    for start in range(0, len(src), chunk):
        block = src[start : start + chunk].astype(np.float64)
        dr = (block[:, 0:1] - dst_r[None, :]) * sy
        dc = (block[:, 1:2] - dst_c[None, :]) * sx
        worst = max(worst, float(np.min(dr * dr + dc * dc, axis=1).max()))
    return worst


def hausdorff_mm(m_a, m_b, spacing=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm.

    ``spacing`` is ``(sx, sy)``; boundary pixels are taken at their centres.
    """
    a, b = _binary(m_a), _binary(m_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("Hausdorff distance needs two nonempty masks")
    pa = np.argwhere(boundary(a))
    pb = np.argwhere(boundary(b))
    return math.sqrt(max(_directed_sq(pa, pb, spacing), _directed_sq(pb, pa, spacing)))


def landmark_error(pairs: Sequence, transform: Callable) -> float:
    """Mean ``|p' - phi(p)|`` over landmark pairs ``(p, p')``."""
    if len(pairs) == 0:
        raise UndefinedMetricError("landmark error needs at least one pair")
    p = np.array([np.asarray(a, dtype=np.float64) for a, _ in pairs])
    q = np.array([np.asarray(b, dtype=np.float64) for _, b in pairs])
    mapped = np.asarray(transform(p), dtype=np.float64)
    d = q - mapped
    # exact summation keeps the mean independent of the pair order
    return math.fsum(np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]).tolist()) / len(pairs)


def centroid_mm(mask, spacing) -> np.ndarray:
    """Centroid ``(x, y)`` in mm with pixel centres at ``(c + 0.5) * sx``."""
    m = _binary(mask)
    if not m.any():
        raise UndefinedMetricError("centroid of an empty mask")
    rows, cols = np.nonzero(m)
    return np.array([(cols.mean() + 0.5) * spacing[0], (rows.mean() + 0.5) * spacing[1]])


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Metrics for one slice or, after aggregation, one patient.

    Optional metrics are ``None`` when they could not be measured.
    """

    patient: str
    slice_id: str = ""
    dice: float | None = None
    hausdorff_mm: float | None = None
    urethra_dev_mm: float | None = None
    landmark_err_mm: float | None = None
    time_s: float | None = None
    n_slices: int = 1

    def to_dict(self):
        return asdict(self)


def aggregate_patient(slice_reports: Sequence[MetricReport]) -> MetricReport:
    """Arithmetic mean per metric over the slices where it is present."""
    if not slice_reports:
        raise ValueError("no slices to aggregate")
    out = MetricReport(patient=slice_reports[0].patient, slice_id="", n_slices=len(slice_reports))
    for name in METRICS:
        vals = [getattr(r, name) for r in slice_reports if getattr(r, name) is not None]
        setattr(out, name, float(np.mean(vals)) if vals else None)
    return out


def aggregate_by_patient(slice_reports: Iterable[MetricReport]) -> list[MetricReport]:
    groups: dict[str, list[MetricReport]] = {}
    for r in slice_reports:
        groups.setdefault(r.patient, []).append(r)
    return [aggregate_patient(groups[p]) for p in groups]


def summary(patient_reports: Sequence[MetricReport], metrics=METRICS) -> dict:
    """Mean and standard deviation across patients for each metric."""
    out = {"n_patients": len(patient_reports)}
    for name in metrics:
        vals = [getattr(r, name) for r in patient_reports if getattr(r, name) is not None]
        out[name] = (
            {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals else None
        )
    return out


def write_metrics_csv(path, slice_reports, patient_reports, include_time: bool = True):
    names = [f.name for f in fields(MetricReport)]
    if not include_time:
        names.remove("time_s")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", *names])
        for level, rows in (("slice", slice_reports), ("patient", patient_reports)):
            for r in rows:
                vals = [getattr(r, n) for n in names]
                w.writerow([level, *("" if v is None else (repr(v) if isinstance(v, float) else v) for v in vals)])


def read_metrics_csv(path) -> tuple[list[MetricReport], list[MetricReport]]:
    slices, patients = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            level = row.pop("level")
            kw = {}
            for f in fields(MetricReport):
                if f.name not in row:
                    continue
                v = row[f.name]
                if f.name in ("patient", "slice_id"):
                    kw[f.name] = v
                elif f.name == "n_slices":
                    kw[f.name] = int(v)
                else:
                    kw[f.name] = None if v == "" else float(v)
            (slices if level == "slice" else patients).append(MetricReport(**kw))
    return slices, patients


def write_summary_json(path, summaries: dict):
    Path(path).write_text(json.dumps(summaries, indent=1, sort_keys=True))


def box_plots(per_backend: dict[str, Sequence[MetricReport]], path, metrics=METRICS[:4]):
    """One panel per metric, one box per backend, over per-patient values."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2), squeeze=False)
    for ax, name in zip(axes[0], metrics):
        data, labels = [], []
        for backend, reports in per_backend.items():
            vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
            if vals:
                data.append(vals)
                labels.append(backend)
        if data:
            ax.boxplot(data)
            ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
