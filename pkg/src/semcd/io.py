"""Raster file reading and writing (PNG through Pillow, TIFF through tifffile)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

RASTER_SUFFIXES = (".png", ".tif", ".tiff")


def read_raster(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        return np.asarray(tifffile.imread(path))
    if suffix == ".png":
        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.dtype == np.int32:
            # Pillow opens 16-bit greyscale PNGs in mode "I"
            arr = arr.astype(np.uint16)
        return arr
    raise ValueError(f"unsupported raster format: {path}")


def write_raster(path, array: np.ndarray) -> None:
    """Write a label map or image losslessly; the format follows the suffix."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    os.makedirs(path.parent, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        tifffile.imwrite(path, arr)
        return
    if suffix != ".png":
        raise ValueError(f"unsupported raster format: {path}")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype == np.uint8:
        if arr.ndim == 2 or arr.shape[2] in (3, 4):
            Image.fromarray(arr).save(path, optimize=False)
            return
    elif arr.dtype == np.uint16 and arr.ndim == 2:
        Image.fromarray(arr).save(path)
        return
    raise ValueError(
        f"PNG supports 8-bit 1/3/4-channel or 16-bit single-channel rasters; "
        f"got {arr.dtype} with shape {arr.shape} (use .tif)"
    )


def find_raster(directory, stem: str):
    """Path of ``directory/stem.<png|tif|tiff>``, or None."""
    for suffix in RASTER_SUFFIXES:
        p = Path(directory) / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


# Distinct colours for class codes 0..5 of L1 and for binary change maps.
L1_COLORS = np.array(
    [
        [0, 0, 0],
        [230, 0, 77],
        [255, 255, 168],
        [0, 140, 0],
        [166, 166, 255],
        [0, 204, 242],
    ],
    dtype=np.uint8,
)


def colorize(labels: np.ndarray, palette: np.ndarray = L1_COLORS) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max(initial=0) >= len(palette):
        rng = np.random.default_rng(0)
        extra = rng.integers(0, 256, size=(labels.max() + 1 - len(palette), 3))
        palette = np.vstack([palette, extra.astype(np.uint8)])
    return palette[labels]
