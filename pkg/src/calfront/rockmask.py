"""Static rock masks from glacier-outline, glacier-tongue and coastline polygons.

Glacier area is the union of outlines and tongues; rock is everything inside
the coastline that the glacier area does not cover. Regions are rasterised
with a pixel-centre rule using a half-open scanline convention, so a centre
lying exactly on an edge counts as inside for the left and bottom edges of a
polygon and outside for the right and top ones.

Planar coordinates in metres, y pointing up; a grid origin is the upper-left
corner of pixel (0, 0).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Polygon, box, mapping, shape
from shapely.geometry.base import BaseGeometry

from .errors import DataError, ValidationError

TAGS = ("glacier_outline", "glacier_tongue", "coastline")


def _as_polygon(poly, index: int) -> Polygon:
    if isinstance(poly, Polygon):
        p = poly
    else:
        verts = np.asarray(poly, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise ValidationError(f"polygon {index}: expected an (n, 2) vertex list")
        p = Polygon(verts)
    ring = np.asarray(p.exterior.coords)
    if not np.isfinite(ring).all():
        raise ValidationError(f"polygon {index}: non-finite coordinates")
    if len(np.unique(ring, axis=0)) < 3:
        raise ValidationError(f"polygon {index}: fewer than 3 distinct vertices")
    if not p.is_valid:
        raise ValidationError(f"polygon {index}: {shapely.is_valid_reason(p)}")
    return p


@dataclass
class PolygonSet:
    polygons: list[Polygon]
    tag: str

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValidationError(f"unknown polygon tag {self.tag!r}; expected one of {TAGS}")
        self.polygons = [_as_polygon(p, i) for i, p in enumerate(self.polygons)]

    def union(self) -> BaseGeometry:
        if not self.polygons:
            return Polygon()
        return shapely.union_all(self.polygons)


def build_glacier_area(outlines: PolygonSet, tongues: PolygonSet) -> BaseGeometry:
    if outlines.tag != "glacier_outline":
        raise ValidationError(f"outlines tagged {outlines.tag!r}")
    if tongues.tag != "glacier_tongue":
        raise ValidationError(f"tongues tagged {tongues.tag!r}")
    return shapely.union_all([*outlines.polygons, *tongues.polygons]) if (
        outlines.polygons or tongues.polygons) else Polygon()


def build_rock_region(coastline: PolygonSet, glacier_area: BaseGeometry) -> BaseGeometry:
    if coastline.tag != "coastline":
        raise ValidationError(f"coastline tagged {coastline.tag!r}")
    if not coastline.polygons:
        raise ValidationError("coastline is empty")
    return coastline.union().difference(glacier_area)


@dataclass
class RockMask:
    mask: np.ndarray
    glacier_id: str = ""
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: float = 1.0
    edits: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.mask.ndim != 2:
            raise ValidationError("rock mask must be 2-D")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError("rock mask must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def _rings(region: BaseGeometry) -> Iterable[np.ndarray]:
    polys = region.geoms if hasattr(region, "geoms") else [region]
    for p in polys:
        if p.is_empty or not isinstance(p, Polygon):
            continue
        yield np.asarray(p.exterior.coords)
        for hole in p.interiors:
            yield np.asarray(hole.coords)


def rasterize(region: BaseGeometry, origin: tuple[float, float], spacing: float,
              height: int, width: int, glacier_id: str = "") -> RockMask:
    """Burn ``region`` into an H x W grid by the even-odd pixel-centre rule."""
    if not spacing > 0:
        raise ValidationError(f"spacing must be positive, got {spacing}")
    if height <= 0 or width <= 0:
        raise ValidationError(f"degenerate grid {height} x {width}")
    x0, y0 = origin
    cy = y0 - (np.arange(height) + 0.5) * spacing
    cx = x0 + (np.arange(width) + 0.5) * spacing
    parity = np.zeros((height, width), dtype=bool)
    for ring in _rings(region):
        a, b = ring[:-1], ring[1:]
        for (xa, ya), (xb, yb) in zip(a, b):
            if ya == yb:
                continue
            lo, hi = min(ya, yb), max(ya, yb)
            rows = np.nonzero((cy >= lo) & (cy < hi))[0]
            if rows.size == 0:
                continue
            xs = xa + (cy[rows] - ya) * (xb - xa) / (yb - ya)
            # every centre at or right of the crossing flips parity
            parity[rows] ^= cx[None, :] >= xs[:, None]
    return RockMask(parity.astype(np.uint8), glacier_id, (x0, y0), spacing)


def refine_near_front(mask: RockMask, edits: Sequence[tuple[int, int]]) -> RockMask:
    """Toggle the listed pixels; the edit list is appended to the mask's log."""
    H, W = mask.shape
    out = mask.mask.copy()
    for r, c in edits:
        if not (0 <= r < H and 0 <= c < W):
            raise ValidationError(f"edit {(r, c)} outside grid {H} x {W}")
        out[r, c] ^= 1
    return replace(mask, mask=out, edits=[*mask.edits, *[(int(r), int(c)) for r, c in edits]])


def mask_to_region(mask: np.ndarray, spacing: float, origin: tuple[float, float] = (0.0, 0.0)) -> BaseGeometry:
    """Exact polygonal outline of the set pixels (union of row runs)."""
    x0, y0 = origin
    boxes = []
    for r, row in enumerate(np.asarray(mask, dtype=bool)):
        padded = np.concatenate([[False], row, [False]])
        d = np.diff(padded.astype(np.int8))
        starts, stops = np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]
        for c0, c1 in zip(starts, stops):
            boxes.append(box(x0 + c0 * spacing, y0 - (r + 1) * spacing, x0 + c1 * spacing, y0 - r * spacing))
    if not boxes:
        return Polygon()
    return shapely.union_all(boxes)


def region_polygons(region: BaseGeometry) -> list[Polygon]:
    if region.is_empty:
        return []
    if isinstance(region, Polygon):
        return [region]
    return [g for g in getattr(region, "geoms", []) if isinstance(g, Polygon)]


# --- file formats -------------------------------------------------------------

def load_polygons(path) -> dict[str, PolygonSet]:
    """Read a GeoJSON FeatureCollection whose features carry a ``tag`` property."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"polygon file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    groups: dict[str, list[Polygon]] = {t: [] for t in TAGS}
    for i, feat in enumerate(doc.get("features", [])):
        tag = (feat.get("properties") or {}).get("tag")
        if tag not in TAGS:
            raise DataError(f"{path}: feature {i} has tag {tag!r}; expected one of {TAGS}")
        geom = shape(feat["geometry"])
        groups[tag].extend(region_polygons(geom))
    try:
        return {t: PolygonSet(ps, t) for t, ps in groups.items()}
    except ValidationError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_polygons(sets: Iterable[PolygonSet], path) -> Path:
    feats = [
        {"type": "Feature", "properties": {"tag": s.tag}, "geometry": mapping(p)}
        for s in sets for p in s.polygons
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": feats}))
    return path


def save_edits(mask: RockMask, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"glacier_id": mask.glacier_id, "edits": mask.edits}))
    return path


def load_edits(path) -> list[tuple[int, int]]:
    doc = json.loads(Path(path).read_text())
    return [tuple(e) for e in doc["edits"]]


def rock_mask_from_polygons(sets: dict[str, PolygonSet], origin, spacing, height, width,
                            glacier_id: str = "") -> RockMask:
    glacier = build_glacier_area(sets["glacier_outline"], sets["glacier_tongue"])
    rock = build_rock_region(sets["coastline"], glacier)
    return rasterize(rock, origin, spacing, height, width, glacier_id)
