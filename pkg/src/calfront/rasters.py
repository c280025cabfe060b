"""Reading and writing single-channel rasters.

Intensity frames and real-valued maps go to TIFF (float32 or float64), label rasters and
binary masks to 8-bit PNG.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

from .errors import DataError, ValidationError

N_CLASSES = 4


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"raster not found: {path}")
    return path


def write_float(path, grid: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid)
    # float32 stays float32; anything else is stored losslessly as float64
    tifffile.imwrite(path, grid if grid.dtype == np.float32 else grid.astype(np.float64))
    return path


def read_float(path) -> np.ndarray:
    path = _require(path)
    try:
        grid = tifffile.imread(path)
    except Exception as exc:  # tifffile raises a zoo of types
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    if grid.ndim != 2:
        raise DataError(f"{path}: expected a single-channel raster, got shape {grid.shape}")
    return grid.astype(np.float64)


def write_labels(path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels)
    bad = np.unique(labels[(labels < 0) | (labels >= N_CLASSES)])
    if bad.size:
        raise ValidationError(f"label values {bad.tolist()} outside class range 0..{N_CLASSES - 1}")
    return _write_u8(path, labels)


def _write_u8(path, grid: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(grid, dtype=np.uint8), mode="L").save(path)
    return path


def read_labels(path) -> np.ndarray:
    """Load a zone raster and reject values outside the four class ids."""
    path = _require(path)
    with Image.open(path) as img:
        labels = np.array(img)
    if labels.ndim != 2:
        raise DataError(f"{path}: expected a single-channel label raster, got shape {labels.shape}")
    bad = np.unique(labels[labels >= N_CLASSES])
    if bad.size:
        raise DataError(f"{path}: label values {bad.tolist()} outside class range 0..{N_CLASSES - 1}")
    return labels.astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> Path:
    return _write_u8(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    path = _require(path)
    with Image.open(path) as img:
        return np.array(img) > 0
