"""Frames, zone labels, annotations and dataset manifests.

Zone labels are stored as single-channel 8-bit rasters with the fixed
encoding NA=0, rock=1, glacier=2, ocean=3.

The few-shot labeling rules live here as well: one manual annotation is
shared across every acquisition of its summer window, and dense validation or
test series borrow the temporally closest manual annotation. Only frames whose
annotation is manual *and* dated on the frame's own acquisition day are
"label-matched" and therefore scored.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import rasters
from .errors import DataError, ValidationError

log = logging.getLogger(__name__)


class Zone(IntEnum):
    NA = 0
    ROCK = 1
    GLACIER = 2
    OCEAN = 3


CLASS_NAMES = ("NA", "rock", "glacier", "ocean")
POLARIZATIONS = ("HH", "HV", "VV", "VH")
SPLITS = ("train", "val", "test")
MANUAL = "manual"
PROPAGATED = "propagated"


def check_zone_map(zones: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    zones = np.asarray(zones)
    if zones.ndim != 2 or zones.size == 0:
        raise ValidationError(f"zone map must be a non-empty 2-D grid, got shape {zones.shape}")
    if shape is not None and zones.shape != tuple(shape):
        raise ValidationError(f"zone map shape {zones.shape} does not match frame shape {tuple(shape)}")
    bad = np.unique(zones[(zones < 0) | (zones > 3)])
    if bad.size:
        raise ValidationError(f"zone values {bad.tolist()} outside {{0,1,2,3}}")
    return zones.astype(np.uint8, copy=False)


@dataclass(eq=False)
class FrontMask:
    """Calving-front pixels on an H x W grid; empty means no front was found."""

    mask: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValidationError(f"front mask must be 2-D, got shape {self.mask.shape}")
        if not self.spacing > 0:
            raise ValidationError(f"pixel spacing must be positive, got {self.spacing}")

    @classmethod
    def from_coords(cls, coords: Iterable[tuple[int, int]], shape: tuple[int, int], spacing: float = 1.0):
        mask = np.zeros(shape, dtype=bool)
        for r, c in coords:
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise ValidationError(f"front pixel {(r, c)} outside grid {shape}")
            mask[r, c] = True
        return cls(mask, spacing)

    @property
    def coords(self) -> np.ndarray:
        return np.argwhere(self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def is_empty(self) -> bool:
        return not self.mask.any()

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, FrontMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.mask, other.mask)


@dataclass(eq=False)
class SarFrame:
    """One single-channel intensity acquisition."""

    intensity: np.ndarray
    date: dt.date
    polarization: str
    pixel_spacing: float
    glacier_id: str
    domain: str = "source"
    name: str = ""
    path: Path | None = None

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.intensity.ndim != 2 or 0 in self.intensity.shape:
            raise ValidationError(f"{self.label}: intensity must be a non-empty H x W grid")
        if not np.isfinite(self.intensity).all():
            raise ValidationError(f"{self.label}: non-finite intensities")
        if self.polarization not in POLARIZATIONS:
            raise ValidationError(f"{self.label}: polarization {self.polarization!r} not in {POLARIZATIONS}")
        if not self.pixel_spacing > 0:
            raise ValidationError(f"{self.label}: pixel spacing must be positive")
        if not self.name:
            self.name = f"{self.glacier_id}_{self.date.isoformat()}"

    @property
    def label(self) -> str:
        return self.name or f"{self.glacier_id}@{self.date}"

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    def __eq__(self, other):
        if not isinstance(other, SarFrame):
            return NotImplemented
        return (
            (self.date, self.polarization, self.pixel_spacing, self.glacier_id, self.domain, self.name)
            == (other.date, other.polarization, other.pixel_spacing, other.glacier_id, other.domain, other.name)
            and np.array_equal(self.intensity, other.intensity)
        )

    def __hash__(self):
        return hash((self.glacier_id, self.date, self.name))


@dataclass(eq=False)
class Annotation:
    glacier_id: str
    date: dt.date
    zones: np.ndarray
    front: FrontMask
    provenance: str = MANUAL

    def __post_init__(self):
        self.zones = check_zone_map(self.zones)
        if self.front.shape != self.zones.shape:
            raise ValidationError("front mask and zone map shapes differ")
        if self.provenance not in (MANUAL, PROPAGATED):
            raise ValidationError(f"unknown provenance {self.provenance!r}")

    @property
    def key(self) -> tuple[str, dt.date]:
        return self.glacier_id, self.date

    def tagged(self, provenance: str) -> "Annotation":
        # shares the label arrays: tagging never touches label content
        return replace(self, provenance=provenance)

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented
        return (
            (self.glacier_id, self.date, self.provenance) == (other.glacier_id, other.date, other.provenance)
            and np.array_equal(self.zones, other.zones)
            and self.front == other.front
        )


@dataclass(eq=False)
class ManifestEntry:
    frame: SarFrame
    annotation: Annotation
    label_match: bool
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        expected = self.annotation.provenance == MANUAL and self.annotation.date == self.frame.date
        if bool(self.label_match) != expected:
            raise ValidationError(
                f"{self.frame.label}: label_match={self.label_match} contradicts annotation "
                f"({self.annotation.provenance}, {self.annotation.date})"
            )
        if self.annotation.glacier_id != self.frame.glacier_id:
            raise ValidationError(f"{self.frame.label}: annotation belongs to glacier {self.annotation.glacier_id}")

    @property
    def domain(self) -> str:
        return self.frame.domain

    def __eq__(self, other):
        if not isinstance(other, ManifestEntry):
            return NotImplemented
        return (
            self.frame == other.frame
            and self.annotation == other.annotation
            and self.label_match == other.label_match
            and self.split == other.split
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def frames(self) -> list[SarFrame]:
        return [e.frame for e in self.entries]

    @property
    def splits(self) -> set[str]:
        return {e.split for e in self.entries}

    @property
    def domains(self) -> set[str]:
        return {e.domain for e in self.entries}

    def label_matched(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label_match]

    def subset(self, split: str | None = None, domain: str | None = None) -> "DatasetManifest":
        return DatasetManifest([
            e for e in self.entries
            if (split is None or e.split == split) and (domain is None or e.domain == domain)
        ])

    def by_name(self) -> dict[str, ManifestEntry]:
        return {e.frame.name: e for e in self.entries}

    def __add__(self, other: "DatasetManifest") -> "DatasetManifest":
        return DatasetManifest(self.entries + other.entries)


def summer_window(year: int) -> tuple[dt.date, dt.date]:
    return dt.date(year, 7, 1), dt.date(year, 8, 31)


def propagate_summer_label(
    annotation: Annotation,
    frames: Sequence[SarFrame],
    window: tuple[dt.date, dt.date] | None = None,
) -> list[tuple[SarFrame, Annotation]]:
    """Share one manual annotation with every frame of its summer window.

    The frame acquired on the annotation date keeps provenance ``manual``;
    all other in-window frames get a ``propagated`` copy. Frames outside the
    (inclusive) window are dropped.
    """
    if window is None:
        window = summer_window(annotation.date.year)
    start, end = window
    pairs = []
    for frame in frames:
        if frame.glacier_id != annotation.glacier_id:
            raise ValidationError(
                f"frame {frame.label} belongs to glacier {frame.glacier_id}, "
                f"annotation to {annotation.glacier_id}"
            )
        if not start <= frame.date <= end:
            continue
        prov = MANUAL if frame.date == annotation.date else PROPAGATED
        pairs.append((frame, annotation.tagged(prov)))
    if frames and not pairs:
        log.warning("no frames of glacier %s inside window %s..%s", annotation.glacier_id, start, end)
    return pairs


def pairs_to_manifest(pairs: Iterable[tuple[SarFrame, Annotation]], split: str) -> DatasetManifest:
    return DatasetManifest([
        ManifestEntry(f, a, a.provenance == MANUAL and a.date == f.date, split) for f, a in pairs
    ])


def assign_nearest_annotation(
    frames: Sequence[SarFrame],
    annotations: Sequence[Annotation],
    split: str = "test",
) -> DatasetManifest:
    """Label every frame with the temporally closest same-glacier annotation.

    Equidistant annotations resolve to the earlier one. The result is
    ordered by (glacier id, date, name) so it does not depend on input order.
    """
    by_glacier: dict[str, list[Annotation]] = {}
    for ann in annotations:
        if ann.provenance != MANUAL:
            raise ValidationError(f"annotation {ann.key} is not manual")
        by_glacier.setdefault(ann.glacier_id, []).append(ann)
    for anns in by_glacier.values():
        anns.sort(key=lambda a: a.date)

    orphans = [f.label for f in frames if f.glacier_id not in by_glacier]
    if orphans:
        raise DataError(f"frames without a same-glacier annotation: {', '.join(sorted(orphans))}")

    entries = []
    for frame in sorted(frames, key=lambda f: (f.glacier_id, f.date, f.name)):
        # min() keeps the first minimum, and candidates are date-sorted
        best = min(by_glacier[frame.glacier_id], key=lambda a: abs((frame.date - a.date).days))
        entries.append(ManifestEntry(frame, best, best.date == frame.date, split))
    return DatasetManifest(entries)


# --- manifest files -------------------------------------------------------

_REQUIRED = ("frame_path", "zone_path", "front_path", "glacier_id", "date",
             "polarization", "pixel_spacing_m", "domain", "split", "label_match")


def _relative(path: Path, root: Path) -> str:
    return os.path.relpath(Path(path).resolve(), root.resolve())


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the manifest JSON, first writing any rasters that have no file yet.

    Rasters without a path are stored under ``frames/``, ``zones/`` and
    ``fronts/`` next to the manifest. Paths inside the file are relative to
    the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    ann_paths: dict[tuple, tuple[Path, Path]] = {}
    records = []
    for entry in manifest:
        frame, ann = entry.frame, entry.annotation
        if frame.path is None:
            frame.path = rasters.write_float(root / "frames" / f"{frame.name}.tif", frame.intensity)
        key = (ann.glacier_id, ann.date)
        if key not in ann_paths:
            stem = f"{ann.glacier_id}_{ann.date.isoformat()}"
            ann_paths[key] = (
                rasters.write_labels(root / "zones" / f"{stem}.png", ann.zones),
                rasters.write_mask(root / "fronts" / f"{stem}.png", ann.front.mask),
            )
        zone_path, front_path = ann_paths[key]
        records.append({
            "frame_path": _relative(frame.path, root),
            "zone_path": _relative(zone_path, root),
            "front_path": _relative(front_path, root),
            "glacier_id": frame.glacier_id,
            "date": frame.date.isoformat(),
            "polarization": frame.polarization,
            "pixel_spacing_m": frame.pixel_spacing,
            "domain": frame.domain,
            "split": entry.split,
            "label_match": entry.label_match,
            "name": frame.name,
            "annotation_date": ann.date.isoformat(),
            "provenance": ann.provenance,
        })
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(records, indent=1))
    os.replace(tmp, path)
    return path


def _parse_date(value, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(value)
    except (TypeError, ValueError):
        raise DataError(f"{where}: field 'date' is not an ISO-8601 date: {value!r}") from None


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON array of records")

    root = path.parent
    annotations: dict[tuple, Annotation] = {}
    entries = []
    for i, rec in enumerate(records):
        where = f"{path}: record {i}"
        if not isinstance(rec, dict):
            raise DataError(f"{where}: expected an object")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise DataError(f"{where}: missing field(s) {', '.join(missing)}")
        date = _parse_date(rec["date"], where)
        label_match = rec["label_match"]
        if not isinstance(label_match, bool):
            raise DataError(f"{where}: field 'label_match' must be a boolean")
        ann_date = _parse_date(rec.get("annotation_date", rec["date"]), where)
        provenance = rec.get("provenance", MANUAL if label_match else PROPAGATED)

        frame_path = root / rec["frame_path"]
        try:
            frame = SarFrame(
                rasters.read_float(frame_path), date, rec["polarization"], float(rec["pixel_spacing_m"]),
                str(rec["glacier_id"]), rec["domain"], rec.get("name", ""), frame_path,
            )
        except ValidationError as exc:
            raise DataError(f"{where}: {exc}") from exc

        key = (frame.glacier_id, ann_date, rec["zone_path"], provenance)
        if key not in annotations:
            zones = rasters.read_labels(root / rec["zone_path"])
            front = FrontMask(rasters.read_mask(root / rec["front_path"]), frame.pixel_spacing)
            try:
                annotations[key] = Annotation(frame.glacier_id, ann_date, zones, front, provenance)
            except ValidationError as exc:
                raise DataError(f"{where}: {exc}") from exc
        ann = annotations[key]
        if ann.zones.shape != frame.shape:
            raise DataError(f"{where}: zone raster shape {ann.zones.shape} != frame shape {frame.shape}")
        try:
            entries.append(ManifestEntry(frame, ann, label_match, rec["split"]))
        except ValidationError as exc:
            raise DataError(f"{where}: {exc}") from exc
    return DatasetManifest(entries)
