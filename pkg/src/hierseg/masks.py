"""Binary mask algebra, MTP/MFP label generation, grayscale codec and overlays.

Binary masks are boolean arrays of shape (H, W). Label masks are uint8
arrays holding class ids 0 (Background), 1 (MTP) and 2 (MFP).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

BACKGROUND, MTP, MFP = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "Background", MTP: "MTP", MFP: "MFP"}

# file encoding: MTP renders white, MFP grey
GRAY_OF_LABEL = {BACKGROUND: 0, MTP: 255, MFP: 128}
LABEL_OF_GRAY = {v: k for k, v in GRAY_OF_LABEL.items()}

RED = (255, 0, 0)
GREEN = (0, 255, 0)
YELLOW = (255, 255, 0)


class MaskShapeError(ValueError):
    pass


class MaskFormatError(ValueError):
    pass


def _same_shape(*masks: np.ndarray) -> None:
    shapes = {np.shape(m) for m in masks}
    if len(shapes) != 1:
        raise MaskShapeError(f"mask dimensions differ: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2 or min(shape) <= 0:
        raise MaskShapeError(f"expected a non-empty 2-D mask, got shape {shape}")


def as_binary(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def intersect(a, b) -> np.ndarray:
    _same_shape(a, b)
    return as_binary(a) & as_binary(b)


def union(a, b) -> np.ndarray:
    _same_shape(a, b)
    return as_binary(a) | as_binary(b)


def subtract(a, b) -> np.ndarray:
    _same_shape(a, b)
    return as_binary(a) & ~as_binary(b)


def generate_mtp_mfp(ap, ofr_test, ofr_retest) -> np.ndarray:
    """Split an articulating-paper mask into confirmed and unconfirmed ink.

    MTP is the AP ink inside the test/retest OFR agreement; MFP is the rest of
    the AP ink. Everything outside the AP mask is background.
    """
    _same_shape(ap, ofr_test, ofr_retest)
    mtp = intersect(ap, intersect(ofr_test, ofr_retest))
    mfp = subtract(ap, mtp)
    labels = np.zeros(np.shape(ap), dtype=np.uint8)
    labels[mtp] = MTP
    labels[mfp] = MFP
    return labels


def check_label_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or min(labels.shape) <= 0:
        raise MaskShapeError(f"expected a non-empty 2-D label mask, got shape {labels.shape}")
    bad = np.setdiff1d(np.unique(labels), list(GRAY_OF_LABEL))
    if bad.size:
        raise MaskFormatError(f"illegal class ids {bad.tolist()}")
    return labels.astype(np.uint8)


def encode_label_mask(labels) -> np.ndarray:
    labels = check_label_mask(labels)
    lut = np.zeros(256, dtype=np.uint8)
    for label, gray in GRAY_OF_LABEL.items():
        lut[label] = gray
    return lut[labels]


def decode_label_mask(raster) -> np.ndarray:
    raster = np.asarray(raster)
    bad = np.setdiff1d(np.unique(raster), list(LABEL_OF_GRAY))
    if bad.size:
        raise MaskFormatError(f"illegal gray values {bad.tolist()} in label mask")
    lut = np.zeros(256, dtype=np.uint8)
    for gray, label in LABEL_OF_GRAY.items():
        lut[gray] = label
    return lut[raster.astype(np.uint8)]


def encode_binary_mask(mask) -> np.ndarray:
    return np.where(as_binary(mask), 255, 0).astype(np.uint8)


def decode_binary_mask(raster) -> np.ndarray:
    raster = np.asarray(raster)
    bad = np.setdiff1d(np.unique(raster), [0, 255])
    if bad.size:
        raise MaskFormatError(f"illegal gray values {bad.tolist()} in binary mask")
    return raster == 255


@dataclass(frozen=True)
class PatientTransform:
    """Crop rectangle in source pixels, then a square resize to ``output_size``."""

    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    output_size: int = 1000

    def __post_init__(self):
        if self.crop_x < 0 or self.crop_y < 0 or self.crop_w <= 0 or self.crop_h <= 0:
            raise ValueError(f"invalid crop rectangle {self}")
        if self.output_size <= 0:
            raise ValueError("output size must be positive")

    @classmethod
    def identity(cls, size: int) -> "PatientTransform":
        return cls(0, 0, size, size, size)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in
                       ("crop_x", "crop_y", "crop_w", "crop_h", "output_size"))

    @classmethod
    def from_text(cls, text: str) -> "PatientTransform":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed transform line {line!r}")
            fields[key.strip()] = int(value)
        try:
            return cls(**fields)
        except TypeError as exc:
            raise ValueError(f"bad transform fields {sorted(fields)}: {exc}") from None


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    # sample at output pixel centers
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.intp), n_in - 1)


def apply_patient_transform(raster, t: PatientTransform, kind: str = "mask") -> np.ndarray:
    """Crop then resize to ``t.output_size`` squared.

    ``kind="mask"`` resamples nearest-neighbor so labels stay categorical;
    ``kind="image"`` uses bilinear interpolation.
    """
    raster = np.asarray(raster)
    h, w = raster.shape[:2]
    if t.crop_x + t.crop_w > w or t.crop_y + t.crop_h > h:
        raise IndexError(f"crop {t} exceeds raster bounds {w}x{h}")
    crop = raster[t.crop_y:t.crop_y + t.crop_h, t.crop_x:t.crop_x + t.crop_w]
    n = t.output_size
    if crop.shape[:2] == (n, n):
        return crop.copy()
    if kind == "mask":
        return crop[_nearest_index(n, t.crop_h)][:, _nearest_index(n, t.crop_w)]
    if kind == "image":
        if crop.dtype != np.uint8:
            raise TypeError("image rasters must be uint8")
        return np.asarray(Image.fromarray(crop).resize((n, n), Image.BILINEAR))
    raise ValueError(f"unknown raster kind {kind!r}")


def overlay_classes(pred, target) -> np.ndarray:
    """0 = neither, 1 = prediction only (FP), 2 = target only (FN), 3 = both (TP)."""
    _same_shape(pred, target)
    return as_binary(pred).astype(np.uint8) + 2 * as_binary(target).astype(np.uint8)


def render_overlay(pred, target, base_image=None, alpha: float = 0.6) -> np.ndarray:
    """Red for FP, green for FN, yellow for TP, optionally blended over a photo."""
    cls = overlay_classes(pred, target)
    colors = np.array([(0, 0, 0), RED, GREEN, YELLOW], dtype=np.float64)
    painted = colors[cls]
    if base_image is None:
        return painted.astype(np.uint8)
    base = np.asarray(base_image)
    if base.shape[:2] != cls.shape:
        raise MaskShapeError(f"base image {base.shape[:2]} does not match masks {cls.shape}")
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    out = base[..., :3].astype(np.float64)
    hit = cls > 0
    out[hit] = (1 - alpha) * out[hit] + alpha * painted[hit]
    return np.round(out).astype(np.uint8)
