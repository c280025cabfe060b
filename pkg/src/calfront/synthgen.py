"""Synthetic multi-temporal glacier scenes.

A scene is a fjord running left to right: a glacier fills the channel from a
rock backstop up to a wavy calving front, rock margins flank the channel up to
the coast, and open ocean lies beyond. A 2 px NA strip frames the image and a
small radar-shadow patch (also NA) sits on one of the margins.

Intensities are class means times a static texture field times unit-mean
gamma speckle. During ice-melange episodes a band of ocean seaward of the
front is rendered with glacier statistics while the zone labels keep calling
it ocean.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import rasters
from .datamodel import (
    Annotation, DatasetManifest, FrontMask, SarFrame, Zone, assign_nearest_annotation,
    pairs_to_manifest, propagate_summer_label, save_manifest,
)
from .errors import ValidationError
from .frontops import extract_front
from .rockmask import PolygonSet, mask_to_region, region_polygons, rock_mask_from_polygons, save_polygons

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassTexture:
    mean: float
    amplitude: float = 0.25
    correlation: float = 2.0


@dataclass(frozen=True)
class TextureStats:
    rock: ClassTexture = ClassTexture(0.45, 0.35, 3.0)
    glacier: ClassTexture = ClassTexture(1.0, 0.25, 1.5)
    ocean: ClassTexture = ClassTexture(0.12, 0.2, 4.0)

    @classmethod
    def from_dict(cls, d: dict) -> "TextureStats":
        return cls(**{k: ClassTexture(**v) for k, v in d.items()})


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    pixel_spacing: float = 10.0
    glacier_id: str = "G000"
    domain: str = "source"
    polarization: str = "HH"
    # margin geometry as fractions of the grid size
    fjord_top: float = 0.34
    fjord_bottom: float = 0.66
    backstop: float = 0.08
    coast: float = 0.82
    wall_wobble: float = 0.04
    # front geometry in pixels
    front_position: float = 26.0
    front_velocity: float = 0.0
    front_wobble: float = 2.0
    melange_steps: frozenset = frozenset()
    melange_width: int = 12
    speckle: float = 0.2
    texture: TextureStats = TextureStats()
    na_border: int = 2
    shadow: bool = True
    # k = orientation % 4 quarter turns, then a left-right flip if orientation >= 4
    orientation: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32 or self.height % 4 or self.width % 4:
            raise ValidationError(f"grid {self.height}x{self.width} must be >= 32 and divisible by 4")
        if not self.pixel_spacing > 0:
            raise ValidationError("pixel spacing must be positive")
        if not 0 < self.fjord_top < self.fjord_bottom < 1:
            raise ValidationError("need 0 < fjord_top < fjord_bottom < 1")
        if not 0 <= self.backstop < self.coast <= 1:
            raise ValidationError("need 0 <= backstop < coast <= 1")
        if self.speckle < 0 or self.melange_width < 0 or self.na_border < 0:
            raise ValidationError("speckle, melange width and NA border must be non-negative")
        if not 0 <= self.orientation < 8:
            raise ValidationError(f"orientation must lie in 0..7, got {self.orientation}")
        if self.orientation % 2 and self.height != self.width:
            raise ValidationError("quarter-turn orientations need a square grid")
        object.__setattr__(self, "melange_steps", frozenset(int(s) for s in self.melange_steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["melange_steps"] = sorted(self.melange_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "texture" in d and isinstance(d["texture"], dict):
            d["texture"] = TextureStats.from_dict(d["texture"])
        if "melange_steps" in d:
            d["melange_steps"] = frozenset(d["melange_steps"])
        return cls(**d)


@dataclass(eq=False)
class SyntheticAcquisition:
    frame: SarFrame
    zones: np.ndarray
    front: FrontMask
    melange: bool

    @property
    def date(self) -> dt.date:
        return self.frame.date


def _round(x):
    # half-up rounding: integer shifts of x shift the result by exactly that integer
    return np.floor(np.asarray(x) + 0.5).astype(int)


@dataclass(frozen=True)
class _Geometry:
    top_wall: np.ndarray      # per column, first fjord row
    bottom_wall: np.ndarray   # per column, first rock row below the fjord
    front_offset: np.ndarray  # per row, wobble added to the front position
    backstop: int
    coast: int
    shadow: tuple[int, int, int, int] | None

    def land(self, H: int, W: int) -> np.ndarray:
        r = np.arange(H)[:, None]
        c = np.arange(W)[None, :]
        outside_fjord = (r < self.top_wall[None, :]) | (r >= self.bottom_wall[None, :]) | (c < self.backstop)
        return (c < self.coast) & outside_fjord

    def channel(self, H: int, W: int) -> np.ndarray:
        r = np.arange(H)[:, None]
        c = np.arange(W)[None, :]
        return (c >= self.backstop) & (c < self.coast) & (r >= self.top_wall[None, :]) & (r < self.bottom_wall[None, :])

    def front_columns(self, spec: SceneSpec, step: int) -> np.ndarray:
        return _round(spec.front_position + spec.front_velocity * step + self.front_offset)


def _geometry(spec: SceneSpec) -> _Geometry:
    rng = np.random.default_rng([spec.seed, 1])
    H, W = spec.height, spec.width
    c = np.arange(W)
    r = np.arange(H)
    amp = spec.wall_wobble * H
    ph = rng.uniform(0, 2 * np.pi, size=3)
    period = rng.uniform(0.6, 1.2, size=3) * W
    top = _round(spec.fjord_top * H + amp * np.sin(2 * np.pi * c / period[0] + ph[0]))
    bottom = _round(spec.fjord_bottom * H + amp * np.sin(2 * np.pi * c / period[1] + ph[1]))
    offset = spec.front_wobble * np.sin(2 * np.pi * r / period[2] + ph[2])
    shadow = None
    if spec.shadow:
        # a radar shadow on the upper margin, near the fjord wall and inside the central half
        sh, sw = max(2, H // 16), max(3, W // 10)
        col = int(rng.integers(W // 4, max(W // 4 + 1, int(spec.coast * W) - sw)))
        row = int(top[col:col + sw].min()) - sh - 1
        if row >= spec.na_border:
            shadow = (row, col, sh, sw)
    return _Geometry(top, bottom, offset, int(round(spec.backstop * W)), int(round(spec.coast * W)), shadow)


def orient(a: np.ndarray, orientation: int) -> np.ndarray:
    """Apply one of the 8 grid symmetries to the last two axes."""
    a = np.rot90(a, orientation % 4, axes=(-2, -1))
    if orientation >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def scene_zones(spec: SceneSpec, step: int, geom: _Geometry | None = None) -> np.ndarray:
    return orient(_canonical_zones(spec, step, geom or _geometry(spec)), spec.orientation)


def _canonical_zones(spec: SceneSpec, step: int, geom: _Geometry) -> np.ndarray:
    H, W = spec.height, spec.width
    zones = np.full((H, W), Zone.OCEAN, dtype=np.uint8)
    zones[geom.land(H, W)] = Zone.ROCK
    front = geom.front_columns(spec, step)
    c = np.arange(W)[None, :]
    zones[geom.channel(H, W) & (c <= front[:, None])] = Zone.GLACIER
    if geom.shadow is not None:
        r0, c0, h, w = geom.shadow
        zones[r0:r0 + h, c0:c0 + w][zones[r0:r0 + h, c0:c0 + w] == Zone.ROCK] = Zone.NA
    b = spec.na_border
    if b:
        zones[:b, :] = zones[-b:, :] = zones[:, :b] = zones[:, -b:] = Zone.NA
    return zones


def _check_front(spec: SceneSpec, geom: _Geometry, n_steps: int) -> None:
    for step in (0, n_steps - 1):
        cols = geom.front_columns(spec, step)
        lo, hi = int(cols.min()), int(cols.max())
        if lo <= geom.backstop or hi >= geom.coast - 1:
            raise ValidationError(
                f"{spec.glacier_id}: front columns {lo}..{hi} at step {step} leave the fjord "
                f"(backstop {geom.backstop}, coast {geom.coast})"
            )


def _texture_field(rng, shape, tex: ClassTexture) -> np.ndarray:
    noise = rng.standard_normal(shape)
    if tex.correlation > 0:
        noise = ndimage.gaussian_filter(noise, tex.correlation, mode="wrap")
        noise /= noise.std() + 1e-12
    return np.clip(1.0 + tex.amplitude * noise, 0.05, None)


def generate_scene(spec: SceneSpec, n_steps: int, start_date: dt.date,
                   cadence_days: int = 12) -> list[SyntheticAcquisition]:
    """Render ``n_steps`` acquisitions ``cadence_days`` apart."""
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    if cadence_days < 1:
        raise ValidationError("cadence_days must be >= 1")
    geom = _geometry(spec)
    _check_front(spec, geom, n_steps)
    H, W = spec.height, spec.width
    tex = spec.texture
    static_rng = np.random.default_rng([spec.seed, 2])
    static = {
        Zone.ROCK: _texture_field(static_rng, (H, W), tex.rock),
        Zone.GLACIER: _texture_field(static_rng, (H, W), tex.glacier),
        Zone.OCEAN: _texture_field(static_rng, (H, W), tex.ocean),
    }
    means = {Zone.ROCK: tex.rock.mean, Zone.GLACIER: tex.glacier.mean, Zone.OCEAN: tex.ocean.mean}
    c = np.arange(W)[None, :]
    out = []
    for step in range(n_steps):
        rng = np.random.default_rng([spec.seed, 3, step])
        zones = _canonical_zones(spec, step, geom)
        intensity = np.zeros((H, W))
        for k in (Zone.ROCK, Zone.GLACIER, Zone.OCEAN):
            sel = zones == k
            intensity[sel] = means[k] * static[k][sel]
        melange = step in spec.melange_steps
        if melange and spec.melange_width:
            front = geom.front_columns(spec, step)[:, None]
            band = (zones == Zone.OCEAN) & (c > front) & (c <= front + spec.melange_width)
            band &= geom.channel(H, W) | (c >= geom.coast)
            # melange continues the glacier's static texture: one scene alone cannot tell them apart
            intensity[band] = tex.glacier.mean * static[Zone.GLACIER][band]
        if spec.speckle > 0:
            shape_k = 1.0 / spec.speckle
            intensity *= rng.gamma(shape_k, 1.0 / shape_k, size=(H, W))
        intensity[zones == Zone.NA] = 0.0
        zones, intensity = orient(zones, spec.orientation), orient(intensity, spec.orientation)
        date = start_date + dt.timedelta(days=step * cadence_days)
        frame = SarFrame(intensity, date, spec.polarization, spec.pixel_spacing, spec.glacier_id,
                         spec.domain, f"{spec.glacier_id}_{date.isoformat()}")
        out.append(SyntheticAcquisition(frame, zones, extract_front(zones, spec.pixel_spacing), melange))
    return out


def scene_polygons(spec: SceneSpec, n_steps: int = 1) -> dict[str, PolygonSet]:
    """Vector inputs for the rock mask, in metres with the grid origin at (0, 0).

    The coastline encloses all land including the glacier at its most advanced
    position; outlines stop a few pixels behind the front (an outdated
    inventory) and tongue polygons cover the up-to-date frontal zone.
    """
    geom = _geometry(spec)
    H, W = spec.height, spec.width
    s = spec.pixel_spacing
    fronts = np.stack([geom.front_columns(spec, t) for t in (0, max(n_steps - 1, 0))])
    max_front = fronts.max(axis=0)[:, None]
    c = np.arange(W)[None, :]
    channel = geom.channel(H, W)
    glacier = channel & (c <= max_front)
    outline = channel & (c <= max_front - 6)
    tongue = glacier & (c > max_front - 10)
    land = geom.land(H, W) | glacier
    land, outline, tongue = (orient(m, spec.orientation) for m in (land, outline, tongue))
    return {
        "coastline": PolygonSet(region_polygons(mask_to_region(land, s)), "coastline"),
        "glacier_outline": PolygonSet(region_polygons(mask_to_region(outline, s)), "glacier_outline"),
        "glacier_tongue": PolygonSet(region_polygons(mask_to_region(tongue, s)), "glacier_tongue"),
    }


# --- domain pairs -------------------------------------------------------------

SOURCE_TEXTURE = TextureStats()
# contrast reversal: dark ice and rock of identical texture, bright rough ocean
TARGET_TEXTURE = TextureStats(
    rock=ClassTexture(0.15, 0.2, 4.0),
    glacier=ClassTexture(0.15, 0.2, 4.0),
    ocean=ClassTexture(1.0, 0.25, 1.5),
)


@dataclass(frozen=True)
class PairLayout:
    """How many glaciers, which years and which cadences make up a domain pair."""

    n_source: int = 10
    source_years: tuple[int, ...] = (2018,)
    source_cadence: int = 12
    source_spacings: tuple[float, ...] = (7.0, 10.0, 20.0)
    n_target_train: int = 12
    n_val: int = 3
    n_test: int = 5
    train_year: int = 2019
    val_year: int = 2017
    test_year: int = 2016
    target_cadence: int = 4
    eval_cadence: int = 6
    val_annotation_months: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 8, 10, 11, 12)
    test_annotation_months: tuple[int, ...] = (1, 3, 4, 5, 10, 12)
    melange_season: tuple[tuple[int, int], tuple[int, int]] = ((11, 15), (5, 31))
    melange_widths: tuple[int, int] = (8, 16)
    # fraction of the width; keeps fronts inside the retained central window
    front_range: tuple[float, float] = (0.3, 0.55)
    front_speed: float = 0.03
    # grid symmetries scenes are drawn from (see ``orient``)
    orientations: tuple[int, ...] = tuple(range(8))


@dataclass
class GlacierYear:
    spec: SceneSpec
    year: int
    acquisitions: list[SyntheticAcquisition]
    polygons: dict[str, PolygonSet]

    @property
    def frames(self) -> list[SarFrame]:
        return [a.frame for a in self.acquisitions]

    def annotation(self, acq: SyntheticAcquisition) -> Annotation:
        return Annotation(self.spec.glacier_id, acq.date, acq.zones, acq.front)

    def rock_mask(self) -> np.ndarray:
        s = self.spec
        return rock_mask_from_polygons(self.polygons, (0.0, 0.0), s.pixel_spacing, s.height, s.width,
                                       s.glacier_id).mask


@dataclass
class DomainDataset:
    domain: str
    glaciers: list[GlacierYear]
    manifests: dict[str, DatasetManifest] = field(default_factory=dict)

    def manifest(self, split: str) -> DatasetManifest:
        return self.manifests.get(split, DatasetManifest())

    def pool(self, split: str | None = None) -> list[SarFrame]:
        names = None
        if split is not None:
            names = {e.frame.glacier_id for e in self.manifest(split)}
        return [f for g in self.glaciers if names is None or g.spec.glacier_id in names for f in g.frames]

    def rock_masks(self) -> dict[str, np.ndarray]:
        return {g.spec.glacier_id: g.rock_mask() for g in self.glaciers}


def in_melange_season(date: dt.date, season) -> bool:
    (m0, d0), (m1, d1) = season
    md = (date.month, date.day)
    return md >= (m0, d0) or md <= (m1, d1)


def _vary(template: SceneSpec, rng: np.random.Generator, glacier_id: str, year: int,
          layout: PairLayout, n_steps: int, start: dt.date, cadence: int, **over) -> SceneSpec:
    W = template.width
    width = int(rng.integers(layout.melange_widths[0], layout.melange_widths[1] + 1))
    lo, hi = layout.front_range[0] * W, layout.front_range[1] * W
    velocity = float(rng.uniform(-layout.front_speed, layout.front_speed))
    drift = abs(velocity) * n_steps
    pos = float(rng.uniform(lo + drift, max(lo + drift, hi - drift)))
    dates = [start + dt.timedelta(days=i * cadence) for i in range(n_steps)]
    steps = frozenset(i for i, d in enumerate(dates) if in_melange_season(d, layout.melange_season))
    orients = [o for o in layout.orientations if template.height == template.width or o % 2 == 0]
    return replace(
        template,
        glacier_id=glacier_id,
        fjord_top=template.fjord_top + float(rng.uniform(-0.05, 0.05)),
        fjord_bottom=template.fjord_bottom + float(rng.uniform(-0.05, 0.05)),
        front_position=pos,
        front_velocity=velocity,
        melange_width=width,
        melange_steps=steps,
        seed=int(rng.integers(2**31)),
        orientation=int(rng.choice(orients)),
        **over,
    )


def _year_scene(template, rng, gid, year, layout, cadence, **over) -> GlacierYear:
    start = dt.date(year, 1, 1) + dt.timedelta(days=int(rng.integers(cadence)))
    n = (dt.date(year, 12, 31) - start).days // cadence + 1
    spec = _vary(template, rng, gid, year, layout, n, start, cadence, **over)
    acqs = generate_scene(spec, n, start, cadence)
    return GlacierYear(spec, year, acqs, scene_polygons(spec, n))


def _pick(acqs: Sequence[SyntheticAcquisition], target: dt.date) -> SyntheticAcquisition:
    return min(acqs, key=lambda a: (abs((a.date - target).days), a.date))


def generate_domain_pair(
    source_spec: SceneSpec,
    target_spec: SceneSpec,
    layout: PairLayout = PairLayout(),
    seed: int = 0,
) -> tuple[DomainDataset, DomainDataset]:
    """Labelled source and target datasets with a controllable domain shift.

    The source domain is fully annotated (every acquisition carries its own
    manual label). The target domain follows the few-shot protocol: one
    manual label per training glacier in mid-summer shared over July and
    August, and dense validation/test years labelled by their nearest manual
    annotation, each partition in a different year.
    """
    if source_spec == replace(target_spec, domain=source_spec.domain, glacier_id=source_spec.glacier_id,
                              seed=source_spec.seed):
        log.warning("source and target specs are identical: no domain shift")
    if min(layout.n_source, layout.n_target_train, layout.n_val, layout.n_test) < 1:
        raise ValidationError("every partition needs at least one glacier")
    years = {layout.train_year, layout.val_year, layout.test_year}
    if len(years) != 3:
        raise ValidationError("train, val and test partitions must use different years")
    if set(layout.source_years) & years:
        log.info("source years overlap target years; domains remain separate")

    root = np.random.SeedSequence(seed)
    src_seq, tgt_seq = root.spawn(2)
    src_rng = np.random.default_rng(src_seq)
    tgt_rng = np.random.default_rng(tgt_seq)

    source_spec = replace(source_spec, domain="source")
    target_spec = replace(target_spec, domain="target")

    src_glaciers, src_entries = [], []
    for i in range(layout.n_source):
        spacing = float(layout.source_spacings[i % len(layout.source_spacings)])
        pol = ("HH", "VV")[i % 2]
        for year in layout.source_years:
            g = _year_scene(source_spec, src_rng, f"S{i:02d}", year, layout, layout.source_cadence,
                            pixel_spacing=spacing, polarization=pol)
            src_glaciers.append(g)
            anns = [g.annotation(a) for a in g.acquisitions]
            src_entries.extend(assign_nearest_annotation(g.frames, anns, "train").entries)
    source = DomainDataset("source", src_glaciers, {"train": DatasetManifest(src_entries)})

    tgt_glaciers: list[GlacierYear] = []
    manifests = {"train": DatasetManifest(), "val": DatasetManifest(), "test": DatasetManifest()}
    pols = ("HH", "HV", "VV", "VH")
    counter = 0
    for i in range(layout.n_target_train):
        g = _year_scene(target_spec, tgt_rng, f"T{counter:03d}", layout.train_year, layout,
                        layout.target_cadence, polarization=pols[counter % 4])
        counter += 1
        tgt_glaciers.append(g)
        acq = _pick(g.acquisitions, dt.date(layout.train_year, 7, 31))
        pairs = propagate_summer_label(g.annotation(acq), g.frames)
        manifests["train"] = manifests["train"] + pairs_to_manifest(pairs, "train")
    for split, n, year, months in (
        ("val", layout.n_val, layout.val_year, layout.val_annotation_months),
        ("test", layout.n_test, layout.test_year, layout.test_annotation_months),
    ):
        for i in range(n):
            g = _year_scene(target_spec, tgt_rng, f"T{counter:03d}", year, layout, layout.eval_cadence,
                            polarization=pols[counter % 4])
            counter += 1
            tgt_glaciers.append(g)
            picked = {_pick(g.acquisitions, dt.date(year, m, 15)).date: None for m in months}
            anns = [g.annotation(a) for a in g.acquisitions if a.date in picked]
            manifests[split] = manifests[split] + assign_nearest_annotation(g.frames, anns, split)
    for split, m in manifests.items():
        if not m.label_matched():
            raise ValidationError(f"target partition {split!r} is empty")
    target = DomainDataset("target", tgt_glaciers, manifests)
    return source, target


# --- on-disk layout -----------------------------------------------------------

def write_domain(dataset: DomainDataset, root) -> Path:
    """Write frames, labels, rock masks, polygons and manifests under ``root``.

    ``manifest.json`` lists labelled frames for all splits; ``archive.json``
    lists every acquisition (labelled or not) with its mélange flag.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    archive = []
    for g in dataset.glaciers:
        gid = g.spec.glacier_id
        save_polygons(g.polygons.values(), root / "polygons" / f"{gid}.geojson")
        rasters.write_mask(root / "rockmasks" / f"{gid}.png", g.rock_mask())
        for a in g.acquisitions:
            f = a.frame
            f.path = rasters.write_float(root / "frames" / f"{f.name}.tif", f.intensity)
            archive.append({
                "frame_path": f"frames/{f.name}.tif", "name": f.name, "glacier_id": gid,
                "date": f.date.isoformat(), "polarization": f.polarization,
                "pixel_spacing_m": f.pixel_spacing, "domain": f.domain, "melange": a.melange,
            })
    (root / "archive.json").write_text(json.dumps(archive, indent=1))
    (root / "scenes.json").write_text(json.dumps([g.spec.to_dict() for g in dataset.glaciers], indent=1))
    entries = [e for split in ("train", "val", "test") for e in dataset.manifest(split)]
    return save_manifest(DatasetManifest(entries), root / "manifest.json")


@dataclass
class StoredDomain:
    """A dataset directory as written by ``write_domain``."""

    root: Path
    manifest: DatasetManifest
    pool: list[SarFrame]
    rock_masks: dict[str, np.ndarray]
    melange: dict[str, bool]

    def split(self, name: str) -> DatasetManifest:
        return self.manifest.subset(name)


def read_domain(root) -> StoredDomain:
    """Load manifest, unlabelled archive frames and rock masks from ``root``.

    Only ``manifest.json`` is required; without ``archive.json`` the pool is
    the manifest's own frames, without ``rockmasks/`` no masks are returned.
    """
    from .datamodel import load_manifest
    from .errors import DataError

    root = Path(root)
    manifest = load_manifest(root / "manifest.json")
    pool, melange = [], {}
    archive = root / "archive.json"
    if archive.is_file():
        try:
            records = json.loads(archive.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{archive}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
        for i, rec in enumerate(records):
            try:
                path = root / rec["frame_path"]
                pool.append(SarFrame(rasters.read_float(path), dt.date.fromisoformat(rec["date"]),
                                     rec["polarization"], float(rec["pixel_spacing_m"]), rec["glacier_id"],
                                     rec["domain"], rec["name"], path))
            except (KeyError, ValueError) as exc:
                raise DataError(f"{archive}: record {i}: {exc}") from exc
            melange[rec["name"]] = bool(rec.get("melange", False))
    else:
        pool = list(manifest.frames)
    masks = {p.stem: rasters.read_mask(p) for p in sorted((root / "rockmasks").glob("*.png"))}
    return StoredDomain(root, manifest, pool, masks, melange)
