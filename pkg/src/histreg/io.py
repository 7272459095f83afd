"""Image files, cohort manifests and run configuration."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .geometry import Image2D
from .preprocess import CasePair, OrientationConfig


class DataError(ValueError):
    """Unreadable input data or an invalid manifest."""


def load_image(path, spacing=(1.0, 1.0), binary: bool = False) -> Image2D:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if binary:
        if arr.ndim == 3:
            arr = arr[..., 0]
        arr = (arr > 0).astype(np.uint8)
    elif arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return Image2D(arr, tuple(float(v) for v in spacing))


def save_image(path, pixels: np.ndarray):
    """PNG or TIFF by suffix; floats are scaled to 8 bits."""
    from PIL import Image

    arr = np.asarray(pixels)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif np.issubdtype(arr.dtype, np.floating):
        hi = float(arr.max()) if arr.size else 0.0
        arr = np.round(255.0 * np.clip(arr, 0, None) / hi if hi > 0 else arr).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path)


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise DataError(f"{where}: missing field {key!r}")
    return entry[key]


def load_manifest(path) -> list[CasePair]:
    """Read a cohort manifest into one :class:`CasePair` per slice.

    Paths are resolved against the manifest's ``root`` (itself relative to
    the manifest file).  Landmarks are ``{"p_mri_mm", "p_hist_mm"}`` pairs.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent / doc.get("root", ".")
    cases = []
    for patient in _require(doc, "patients", str(path)):
        pid = str(_require(patient, "patient_id", str(path)))
        for entry in _require(patient, "slices", pid):
            where = f"{pid}/{entry.get('slice_id', '?')}"
            hsp = entry.get("hist_spacing_mm", (1.0, 1.0))
            msp = entry.get("mri_spacing_mm", (1.0, 1.0))
            hist = load_image(root / _require(entry, "hist_path", where), hsp)
            mri = load_image(root / _require(entry, "mri_path", where), msp)
            hist_mask = load_image(root / _require(entry, "hist_mask_path", where), hsp, binary=True)
            mri_mask = load_image(root / _require(entry, "mri_mask_path", where), msp, binary=True)
            labels = {k: load_image(root / v, hsp, binary=True) for k, v in entry.get("label_paths", {}).items()}
            mri_labels = {
                k: load_image(root / v, msp, binary=True) for k, v in entry.get("mri_label_paths", {}).items()
            }
            landmarks = [
                (np.asarray(lm["p_mri_mm"], dtype=np.float64), np.asarray(lm["p_hist_mm"], dtype=np.float64))
                for lm in entry.get("landmarks", [])
            ]
            try:
                orientation = OrientationConfig(float(entry.get("rotation_deg", 0.0)), bool(entry.get("hflip", False)))
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from exc
            cases.append(
                CasePair(
                    hist, hist_mask, mri, mri_mask, labels, mri_labels, landmarks, orientation,
                    patient=pid, slice_id=str(entry.get("slice_id", len(cases))),
                )
            )
    if not cases:
        raise DataError(f"manifest {path} lists no slices")
    return cases


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class RunConfig:
    """Everything a CLI stage needs besides its input paths."""

    seed: int = 0
    canvas: tuple[int, int] = (120, 120)
    n_sources: int = 100
    n_per_image: int = 5
    lr: float = 1e-3
    lr_decay: float = 0.95
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    val_fraction: float = 0.1
    extractor: str = "small"
    pretrained: bool = False
    margin_px: int = 0
    iterative: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read configuration {path}: {exc}") from exc
