"""Figure products: gray zone panels, front overlays, uncertainty panels.

Colour conventions: zones on a gray ramp (NA black, rock dark gray, glacier
light gray, ocean white); predicted fronts yellow, reference fronts blue,
their overlap pink (magenta). Fronts are dilated with a disk before drawing.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image
from scipy import ndimage

from .errors import ValidationError

ZONE_GRAY = np.array([0, 85, 170, 255], dtype=np.uint8)
YELLOW = (255, 255, 0)
BLUE = (0, 0, 255)
PINK = (255, 0, 255)
UNCERTAINTY_CMAP = "inferno"


def disk(radius: int) -> np.ndarray:
    if radius < 0:
        raise ValidationError("dilation radius must be >= 0")
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius))


def zone_panel(zones: np.ndarray) -> np.ndarray:
    """(H, W) zone map -> (H, W, 3) uint8 gray ramp."""
    zones = np.asarray(zones)
    if zones.size and zones.max() > 3:
        raise ValidationError("zone values must lie in 0..3")
    g = ZONE_GRAY[zones]
    return np.repeat(g[..., None], 3, axis=-1)


def gray_background(intensity: np.ndarray) -> np.ndarray:
    """Log-stretched SAR intensity as a gray RGB image."""
    x = np.log10(np.asarray(intensity, dtype=np.float64) + 1e-3)
    lo, hi = np.percentile(x, [1, 99]) if x.size else (0.0, 1.0)
    g = np.clip((x - lo) / max(hi - lo, 1e-12), 0, 1)
    g = (g * 255).round().astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def front_overlay(pred_front: np.ndarray, truth_front: np.ndarray, radius: int = 3,
                  background: np.ndarray | None = None) -> np.ndarray:
    """Draw dilated fronts over ``background`` (gray RGB; black if omitted)."""
    pred_front = np.asarray(pred_front, dtype=bool)
    truth_front = np.asarray(truth_front, dtype=bool)
    if pred_front.shape != truth_front.shape:
        raise ValidationError(f"front shapes differ: {pred_front.shape} vs {truth_front.shape}")
    if background is None:
        img = np.zeros((*pred_front.shape, 3), dtype=np.uint8)
    else:
        img = np.array(background, dtype=np.uint8)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        if img.shape[:2] != pred_front.shape:
            raise ValidationError("background grid differs from the front grid")
    p, t = dilate(pred_front, radius), dilate(truth_front, radius)
    img[p & ~t] = YELLOW
    img[t & ~p] = BLUE
    img[p & t] = PINK
    return img


def colour_counts(img: np.ndarray) -> dict[str, int]:
    """Number of yellow, blue and pink pixels in an RGB image."""
    out = {}
    for name, c in (("yellow", YELLOW), ("blue", BLUE), ("pink", PINK)):
        out[name] = int(np.all(img == np.array(c, dtype=np.uint8), axis=-1).sum())
    return out


def uncertainty_panel(std: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """(H, W) logit std -> (H, W, 3) uint8 colour map, 0 mapped to the darkest colour."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std < 0):
        raise ValidationError("uncertainty must be non-negative")
    vmax = float(std.max()) if vmax is None else float(vmax)
    scaled = std / vmax if vmax > 0 else np.zeros_like(std)
    rgba = colormaps[UNCERTAINTY_CMAP](np.clip(scaled, 0, 1))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def write_rgb(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode="RGB").save(path)
    return path


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def hstack_panels(panels: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Join equally tall RGB panels left to right with a white gap."""
    h = panels[0].shape[0]
    if any(p.shape[0] != h for p in panels):
        raise ValidationError("panels must share a height")
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    out = []
    for i, p in enumerate(panels):
        if i:
            out.append(spacer)
        out.append(p)
    return np.concatenate(out, axis=1)
