"""Synthetic occlusal-contact data, on-disk dataset layout, fold splits, augmentation.

Layout of a dataset root::

    patient_<id>/image_<thickness>_<application>_<session>.png   RGB photograph
    patient_<id>/ap_<thickness>_<application>_<session>.png      AP mask {0,255}
    patient_<id>/ofr_test.png, ofr_retest.png                     OFR masks {0,255}
    patient_<id>/transform.txt                                    crop/resize sidecar
    patient_<id>/mask_<thickness>_<application>_<session>.png    label mask {0,128,255}

The ``mask_*`` files are written by mask generation, not by the generator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from hierseg.io import read_png_gray, read_png_rgb, write_png, write_text
from hierseg.masks import (MaskFormatError, PatientTransform, apply_patient_transform,
                           decode_binary_mask, decode_label_mask, encode_binary_mask,
                           encode_label_mask, generate_mtp_mfp)

THICKNESSES = (12, 40, 100, 200)
APPLICATIONS = ("active", "passive")
SESSIONS = ("test", "retest")
CONDITIONS = tuple(f"{t}_{a}_{s}" for t, a, s in itertools.product(THICKNESSES, APPLICATIONS, SESSIONS))

TOOTH = np.array([0.93, 0.90, 0.82])
INK = np.array([0.25, 0.38, 0.88])       # unconfirmed ink
CONTACT = np.array([0.55, 0.08, 0.32])   # ink pressed into a real contact


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError, MaskFormatError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass
class PatientRecord:
    patient_id: str
    images: dict[str, np.ndarray]
    ap: dict[str, np.ndarray]
    ofr_test: np.ndarray
    ofr_retest: np.ndarray
    transform: PatientTransform
    labels: dict[str, np.ndarray] | None = None

    def equals(self, other: "PatientRecord", labels: bool = True) -> bool:
        def same(a: dict, b: dict) -> bool:
            return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

        ok = (self.patient_id == other.patient_id and self.transform == other.transform
              and same(self.images, other.images) and same(self.ap, other.ap)
              and np.array_equal(self.ofr_test, other.ofr_test)
              and np.array_equal(self.ofr_retest, other.ofr_retest))
        if labels:
            ok = ok and (self.labels is None) == (other.labels is None)
            ok = ok and (self.labels is None or same(self.labels, other.labels))
        return ok


@dataclass(frozen=True)
class SynthConfig:
    patients: int = 8
    size: int = 64
    overlap: float = 0.6
    seed: int = 0
    sites: tuple[int, int] = (3, 5)
    # semi-axis range of an AP ink blob, as a fraction of the raster side
    blob_radius: tuple[float, float] = (0.07, 0.13)
    ofr_only_sites: int = 1
    ink_probability: float = 0.8
    noise: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise SynthConfigError(f"overlap fraction must lie in [0, 1], got {self.overlap}")
        if self.patients < 1 or self.size < 8:
            raise SynthConfigError("need at least one patient and a raster of 8 pixels or more")
        lo, hi = self.blob_radius
        if not 0 < lo <= hi:
            raise SynthConfigError(f"bad blob radius range {self.blob_radius}")
        if 2 * hi * self.size + 2 >= self.size:
            raise SynthConfigError(f"blobs of radius {hi * self.size:.1f}px do not fit a {self.size}px raster")


def _ellipse(size: int, cy: float, cx: float, a: float, b: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place_sites(rng: np.random.Generator, cfg: SynthConfig, count: int) -> list[tuple]:
    size = cfg.size
    lo, hi = cfg.blob_radius[0] * size, cfg.blob_radius[1] * size
    sites: list[tuple] = []
    for _ in range(2000):
        if len(sites) == count:
            return sites
        a, b = rng.uniform(lo, hi, size=2)
        r = max(a, b)
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        if all(np.hypot(cy - s[0], cx - s[1]) > r + max(s[2], s[3]) + 2 for s in sites):
            sites.append((cy, cx, a, b, rng.uniform(0, np.pi)))
    raise SynthConfigError(f"could not place {count} non-overlapping blobs on a {size}px raster")


def _render(rng: np.random.Generator, cfg: SynthConfig, ap: np.ndarray, core: np.ndarray,
            strength: float) -> np.ndarray:
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size] / size
    shade = 0.92 + 0.08 * np.cos(np.pi * (yy - 0.5)) * np.cos(np.pi * (xx - 0.5))
    fissure = np.exp(-(((yy - 0.5 - 0.1 * np.sin(6 * xx + rng.uniform(0, 6))) / 0.03) ** 2))
    img = TOOTH * (shade - 0.15 * fissure)[..., None]
    img[ap] = (1 - strength) * img[ap] + strength * INK
    img[core] = (1 - strength) * img[core] + strength * CONTACT
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def synth_patient(cfg: SynthConfig, index: int) -> PatientRecord:
    rng = np.random.default_rng([cfg.seed, index])
    n_sites = int(rng.integers(cfg.sites[0], cfg.sites[1] + 1))
    sites = _place_sites(rng, cfg, n_sites + cfg.ofr_only_sites)
    inkable, ofr_only = sites[:n_sites], sites[n_sites:]
    size = cfg.size
    scale = np.sqrt(cfg.overlap)

    blobs = [_ellipse(size, cy, cx, a, b, t) for cy, cx, a, b, t in inkable]
    cores = [_ellipse(size, cy, cx, a * scale, b * scale, t) if scale > 0 else np.zeros((size, size), bool)
             for cy, cx, a, b, t in inkable]
    # a blob's core must not spill past its own ink at overlap 1
    cores = [c & bl for c, bl in zip(cores, blobs)]
    confirmed = np.logical_or.reduce(cores)
    ofr_test = confirmed.copy()
    ofr_retest = confirmed.copy()
    for cy, cx, a, b, t in ofr_only:
        ofr_test |= _ellipse(size, cy, cx, a, b, t)
        ofr_retest |= _ellipse(size, cy + rng.uniform(-1, 1), cx + rng.uniform(-1, 1), a, b, t)

    images, aps, labels = {}, {}, {}
    for ci, cond in enumerate(CONDITIONS):
        crng = np.random.default_rng([cfg.seed, index, ci])
        inked = crng.random(n_sites) < cfg.ink_probability
        if not inked.any():
            inked[crng.integers(n_sites)] = True
        ap = np.logical_or.reduce([bl for bl, k in zip(blobs, inked) if k])
        core = ap & confirmed
        strength = 0.75 + 0.05 * THICKNESSES.index(int(cond.split("_")[0]))
        images[cond] = _render(crng, cfg, ap, core, strength)
        aps[cond] = ap
        lab = np.zeros((size, size), np.uint8)
        lab[ap] = 2
        lab[core] = 1
        labels[cond] = lab
    return PatientRecord(f"{index:02d}", images, aps, ofr_test, ofr_retest,
                         PatientTransform.identity(size), labels)


def synth_generate(cfg: SynthConfig) -> list[PatientRecord]:
    """Synthetic patients whose MTP/MFP ground truth is known by construction."""
    return [synth_patient(cfg, i) for i in range(cfg.patients)]


def write_dataset(records: Iterable[PatientRecord], root: str | Path) -> None:
    root = Path(root)
    for rec in records:
        d = root / f"patient_{rec.patient_id}"
        for cond, img in rec.images.items():
            write_png(d / f"image_{cond}.png", img)
            write_png(d / f"ap_{cond}.png", encode_binary_mask(rec.ap[cond]))
        write_png(d / "ofr_test.png", encode_binary_mask(rec.ofr_test))
        write_png(d / "ofr_retest.png", encode_binary_mask(rec.ofr_retest))
        write_text(d / "transform.txt", rec.transform.to_text())


def write_label_masks(patient_id: str, labels: dict[str, np.ndarray], root: str | Path) -> list[Path]:
    d = Path(root) / f"patient_{patient_id}"
    paths = []
    for cond, lab in labels.items():
        path = d / f"mask_{cond}.png"
        write_png(path, encode_label_mask(lab))
        paths.append(path)
    return paths


def _read_mask(path: Path, decoder) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing mask {path}")
    try:
        return decoder(read_png_gray(path))
    except MaskFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from None


def load_patient(pdir: Path, mask_root: Path | None = None, require_labels: bool = False) -> PatientRecord:
    pid = pdir.name.removeprefix("patient_")
    tpath = pdir / "transform.txt"
    if not tpath.exists():
        raise DatasetError(f"missing transform sidecar {tpath}")
    try:
        transform = PatientTransform.from_text(tpath.read_text())
    except ValueError as exc:
        raise DatasetError(f"{tpath}: {exc}") from None

    def fit(raster, path, kind):
        try:
            return apply_patient_transform(raster, transform, kind)
        except IndexError as exc:
            raise DatasetError(f"{path}: {exc}") from None

    ofr = {}
    for name in ("ofr_test", "ofr_retest"):
        path = pdir / f"{name}.png"
        ofr[name] = fit(_read_mask(path, decode_binary_mask), path, "mask")

    conds = sorted(p.name[len("image_"):-len(".png")] for p in pdir.glob("image_*.png"))
    if not conds:
        raise DatasetError(f"no images in {pdir}")
    images, aps, labels = {}, {}, {}
    label_dir = (mask_root / pdir.name) if mask_root is not None else pdir
    for cond in conds:
        ipath = pdir / f"image_{cond}.png"
        images[cond] = fit(read_png_rgb(ipath), ipath, "image")
        apath = pdir / f"ap_{cond}.png"
        aps[cond] = fit(_read_mask(apath, decode_binary_mask), apath, "mask")
        mpath = label_dir / f"mask_{cond}.png"
        if mpath.exists():
            labels[cond] = fit(_read_mask(mpath, decode_label_mask), mpath, "mask")
        elif require_labels:
            raise DatasetError(f"missing label mask {mpath}")

    shape = ofr["ofr_test"].shape
    for name, raster in [("ofr_retest", ofr["ofr_retest"]), *((f"image_{c}", images[c]) for c in conds),
                         *((f"ap_{c}", aps[c]) for c in conds), *((f"mask_{c}", m) for c, m in labels.items())]:
        if raster.shape[:2] != shape:
            raise DatasetError(f"patient {pid}: {name} is {raster.shape[:2]}, expected {shape}")
    return PatientRecord(pid, images, aps, ofr["ofr_test"], ofr["ofr_retest"], transform,
                         labels if labels else None)


def load_dataset(root: str | Path, mask_root: str | Path | None = None,
                 require_labels: bool = False) -> list[PatientRecord]:
    root = Path(root)
    pdirs = sorted(p for p in root.glob("patient_*") if p.is_dir())
    if not pdirs:
        raise DatasetError(f"no patient_* directories under {root}")
    return [load_patient(p, Path(mask_root) if mask_root else None, require_labels) for p in pdirs]


class FoldConfigError(ValueError):
    pass


def kfold_split(patient_ids: Sequence[str], k: int = 4, seed: int = 0) -> dict[str, int]:
    """Patient-wise folds: seeded shuffle, then contiguous blocks.

    When the count is not divisible by ``k`` the first folds get one extra
    patient each.
    """
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise FoldConfigError("duplicate patient ids")
    if k < 2 or k > len(ids):
        raise FoldConfigError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    blocks = np.array_split(order, k)
    return {ids[i]: fold for fold, block in enumerate(blocks) for i in block}


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0
    brightness: float = 1.0


def draw_augmentation(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(flip=bool(rng.random() < 0.5),
                         angle=float(rng.uniform(-15.0, 15.0)),
                         brightness=float(rng.uniform(0.8, 1.2)))


def apply_augmentation(image: np.ndarray, labels: np.ndarray, params: AugmentParams):
    """Same geometry on image and labels; brightness on the image only.

    ``image`` is float in [0, 1], shape (H, W, C). Labels are rotated
    nearest-neighbor, filling uncovered corners with background.
    """
    img = np.asarray(image, dtype=np.float64)
    lab = np.asarray(labels)
    if img.shape[:2] != lab.shape:
        raise ValueError(f"image {img.shape[:2]} and labels {lab.shape} differ")
    if params.flip:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if params.angle:
        img = ndimage.rotate(img, params.angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, params.angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    if params.brightness != 1.0:
        img = np.clip(img * params.brightness, 0.0, 1.0)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def augment(image: np.ndarray, labels: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    return apply_augmentation(image, labels, draw_augmentation(np.random.default_rng(seed)))


@dataclass
class Example:
    key: str
    patient_id: str
    image: np.ndarray      # float (H, W, 3) in [0, 1]
    labels: np.ndarray     # uint8 (H, W)
    extra: dict = field(default_factory=dict)


def examples_for(records: Iterable[PatientRecord], patient_ids: Iterable[str] | None = None) -> list[Example]:
    wanted = None if patient_ids is None else set(patient_ids)
    out = []
    for rec in records:
        if wanted is not None and rec.patient_id not in wanted:
            continue
        if rec.labels is None:
            raise DatasetError(f"patient {rec.patient_id} has no label masks")
        for cond in sorted(rec.images):
            if cond not in rec.labels:
                raise DatasetError(f"patient {rec.patient_id} lacks a label mask for {cond}")
            out.append(Example(f"{rec.patient_id}/{cond}", rec.patient_id,
                               rec.images[cond].astype(np.float64) / 255.0, rec.labels[cond]))
    return out


def pipeline_labels(rec: PatientRecord) -> dict[str, np.ndarray]:
    """Label masks derived from the record's AP and OFR masks."""
    return {cond: generate_mtp_mfp(rec.ap[cond], rec.ofr_test, rec.ofr_retest) for cond in rec.ap}
