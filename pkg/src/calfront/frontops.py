"""Front extraction and evaluation metrics.

A front pixel is a glacier pixel with at least one ocean pixel among its eight
neighbours. When the contact splits into several 8-connected pieces only the
largest is kept, which suppresses isolated glacier/ocean speckle contacts.

The mean distance error (MDE) is the symmetric mean nearest-neighbour
distance between predicted and reference front pixels, in metres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .datamodel import CLASS_NAMES, DatasetManifest, FrontMask, Zone, check_zone_map
from .errors import DataError, ValidationError

EIGHT = np.ones((3, 3), dtype=bool)


def extract_front(zones: np.ndarray, spacing: float = 1.0) -> FrontMask:
    zones = check_zone_map(zones)
    ocean_near = ndimage.binary_dilation(zones == Zone.OCEAN, structure=EIGHT)
    contact = (zones == Zone.GLACIER) & ocean_near
    labels, n = ndimage.label(contact, structure=EIGHT)
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        # argmax takes the first maximum: ties go to the component met first in raster order
        contact = labels == (int(np.argmax(sizes)) + 1)
    return FrontMask(contact, spacing)


def mde(pred: FrontMask, truth: FrontMask) -> float:
    """Symmetric mean nearest-neighbour distance in metres.

    Returns NaN when the prediction has no front (a "missing front").
    """
    if truth.is_empty():
        raise DataError("reference front is empty")
    if pred.spacing != truth.spacing:
        raise ValidationError(f"pixel spacings differ: {pred.spacing} vs {truth.spacing}")
    if pred.is_empty():
        return math.nan
    p = pred.coords.astype(float)
    g = truth.coords.astype(float)
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    return 0.5 * (d_pg.mean() + d_gp.mean()) * pred.spacing


@dataclass
class IoU:
    per_class: dict[str, float | None]
    mean: float

    def __getitem__(self, name: str) -> float | None:
        return self.per_class[name]


def iou(pred: np.ndarray, truth: np.ndarray) -> IoU:
    pred = check_zone_map(pred)
    truth = check_zone_map(truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    per_class: dict[str, float | None] = {}
    for k, name in enumerate(CLASS_NAMES):
        p, t = pred == k, truth == k
        union = np.count_nonzero(p | t)
        per_class[name] = np.count_nonzero(p & t) / union if union else None
    defined = [v for v in per_class.values() if v is not None]
    return IoU(per_class, float(np.mean(defined)) if defined else math.nan)


def central_crop(grid: np.ndarray, fraction: float) -> np.ndarray:
    """Crop the last two axes to the central ``ceil(n * fraction)`` window.

    For odd leftovers the window sits one pixel closer to index 0.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"crop fraction must lie in (0, 1], got {fraction}")
    H, W = grid.shape[-2:]
    h, w = math.ceil(H * fraction), math.ceil(W * fraction)
    top, left = (H - h) // 2, (W - w) // 2
    return grid[..., top:top + h, left:left + w]


# --- evaluation -------------------------------------------------------------

@dataclass
class ImageRecord:
    name: str
    distance_m: float | None
    missing: bool
    iou: dict[str, float | None]
    mean_iou: float


@dataclass
class EvalReport:
    images: list[ImageRecord] = field(default_factory=list)

    @property
    def evaluated(self) -> list[ImageRecord]:
        return [r for r in self.images if not r.missing]

    @property
    def n_missing(self) -> int:
        return sum(r.missing for r in self.images)

    @property
    def mde(self) -> float:
        d = [r.distance_m for r in self.evaluated]
        return float(np.mean(d)) if d else math.nan

    def class_iou(self, name: str) -> float:
        vals = [r.iou[name] for r in self.images if r.iou[name] is not None]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_iou(self) -> float:
        vals = [self.class_iou(n) for n in CLASS_NAMES]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> dict[str, float]:
        out = {"mde": self.mde, "missing": float(self.n_missing), "all": self.mean_iou}
        out.update({n: self.class_iou(n) for n in CLASS_NAMES})
        return out

    def to_dict(self) -> dict:
        return {
            "summary": _json_floats(self.summary()),
            "n_label_matched": len(self.images),
            "n_evaluated": len(self.evaluated),
            "images": [
                {"name": r.name, "distance_m": r.distance_m, "missing": r.missing,
                 "iou": r.iou, "mean_iou": r.mean_iou}
                for r in self.images
            ],
        }


def _json_floats(d: Mapping[str, float]) -> dict[str, float | None]:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def evaluate(
    predictions: Mapping[str, np.ndarray],
    manifest: DatasetManifest,
    crop_fraction: float | None = None,
) -> EvalReport:
    """Score predictions against the label-matched frames of a manifest.

    ``predictions`` maps frame names to predicted zone maps. Predictions for
    frames that exist in the manifest but are not label-matched are accepted
    and ignored. With ``crop_fraction`` set, reference labels are cropped to
    the central window the network retains.
    """
    known = manifest.by_name()
    matched = [e for e in manifest if e.label_match]
    unknown = sorted(set(predictions) - set(known))
    lacking = sorted(e.frame.name for e in matched if e.frame.name not in predictions)
    if unknown or lacking:
        parts = []
        if lacking:
            parts.append(f"no prediction for: {', '.join(lacking)}")
        if unknown:
            parts.append(f"predictions not in manifest: {', '.join(unknown)}")
        raise DataError("; ".join(parts))

    report = EvalReport()
    for entry in matched:
        name = entry.frame.name
        truth_zones = entry.annotation.zones
        truth_front = entry.annotation.front.mask
        if crop_fraction is not None:
            truth_zones = central_crop(truth_zones, crop_fraction)
            truth_front = central_crop(truth_front, crop_fraction)
        pred = np.asarray(predictions[name])
        if pred.shape != truth_zones.shape:
            raise DataError(f"{name}: prediction shape {pred.shape} != reference shape {truth_zones.shape}")
        spacing = entry.frame.pixel_spacing
        truth = FrontMask(truth_front, spacing)
        if truth.is_empty():
            raise DataError(f"{name}: reference front is empty")
        front = extract_front(pred, spacing)
        dist = None if front.is_empty() else mde(front, truth)
        scores = iou(pred, truth_zones)
        report.images.append(ImageRecord(name, dist, dist is None, scores.per_class, scores.mean))
    return report


@dataclass
class RunAggregate:
    """Mean and population standard deviation of run summaries."""

    mean: dict[str, float]
    std: dict[str, float]
    n_runs: int


def aggregate_runs(reports: Sequence[EvalReport]) -> RunAggregate:
    if not reports:
        raise ValidationError("no runs to aggregate")
    keys = reports[0].summary().keys()
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r.summary()[k] for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        mean[k] = float(vals.mean()) if vals.size else math.nan
        std[k] = float(vals.std()) if vals.size else math.nan
    return RunAggregate(mean, std, len(reports))


COLUMNS = ("MDE", "Missing Fronts", "All", "NA", "Rock", "Glacier", "Ocean")
_KEYS = ("mde", "missing", "all", "NA", "rock", "glacier", "ocean")


def _cell(key: str, mean: float, std: float | None) -> str:
    if math.isnan(mean):
        return "n/a"
    scale = 1.0 if key in ("mde", "missing") else 100.0
    if std is None:
        # a single run's missing-front count is a whole number
        return str(int(mean)) if key == "missing" else f"{mean * scale:.1f}"
    return f"{mean * scale:.1f}±{std * scale:.1f}"


def table_row(result: EvalReport | RunAggregate) -> list[str]:
    if isinstance(result, EvalReport):
        s = result.summary()
        return [_cell(k, s[k], None) for k in _KEYS]
    if result.n_runs == 1:
        return [_cell(k, result.mean[k], None) for k in _KEYS]
    return [_cell(k, result.mean[k], result.std[k]) for k in _KEYS]


def render_table(rows: Mapping[str, EvalReport | RunAggregate]) -> str:
    """Plain-text table with MDE (m), missing fronts and IoU (percent) columns."""
    header = ["Model", *COLUMNS]
    body = [[name, *table_row(res)] for name, res in rows.items()]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines)
