"""PNG and text file helpers. Every write goes to a temp file and is renamed into place."""

from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image


@contextmanager
def atomic_path(path: str | Path):
    """Yield a temp path next to ``path``; rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode())


def write_png(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.dtype != np.uint8:
        raise TypeError(f"PNG rasters must be uint8, got {raster.dtype}")
    with atomic_path(path) as tmp:
        Image.fromarray(raster).save(tmp, format="PNG")


def read_png_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise ValueError(f"{path}: expected an 8-bit grayscale PNG, got mode {im.mode}")
        return np.asarray(im.convert("L"))


def read_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
