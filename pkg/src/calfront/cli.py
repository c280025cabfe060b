"""Command-line entry points.

Every command takes ``--config PATH`` (JSON run config) plus flag overrides
and dumps the resolved configuration next to its outputs. Exit codes: 0 ok,
2 invalid input or configuration, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import figures, rasters
from .adapt import TrainConfig
from .composer import CONSECUTIVE, SUMMER_REFERENCE, ComposedSeries, SeriesPolicy, compose
from .datamodel import CLASS_NAMES, DatasetManifest, load_manifest
from .ensemble import ensemble_predict
from .errors import CalfrontError, DataError, ValidationError
from .experiments import EXPERIMENTS, Setup, experiment_setup, toy_configs, toy_specs, train_setup
from .frontops import EvalReport, aggregate_runs, central_crop, evaluate, extract_front, render_table
from .net import NetConfig, load_checkpoint, prepare_intensity, retain_central, save_checkpoint
from .rockmask import load_edits, load_polygons, refine_near_front, rock_mask_from_polygons, save_edits
from .synthgen import PairLayout, SceneSpec, generate_domain_pair, read_domain, write_domain

log = logging.getLogger("calfront")

DATA_ROOT_ENV = "CALFRONT_DATA_ROOT"


# --- run configuration --------------------------------------------------------

def _layout_from_dict(d: dict) -> PairLayout:
    tuples = {f.name for f in fields(PairLayout) if "tuple" in str(f.type)}
    d = dict(d)
    for k in tuples & set(d):
        d[k] = tuple(tuple(v) if isinstance(v, list) else v for v in d[k])
    return PairLayout(**d)


def _merge(base, overrides: dict | None, to_dict, from_dict):
    if not overrides:
        return base
    return from_dict({**to_dict(base), **overrides})


@dataclass
class RunConfig:
    data_root: str | None = None
    out: str = "."
    experiment: str = "rock_mask"
    seed: int = 0
    members: int | None = None
    policy: str | None = None       # overrides the experiment's series policy
    rock_mask: bool | None = None   # overrides the experiment's rock-mask switch
    size: int = 48
    source_spec: SceneSpec = field(default_factory=lambda: toy_specs(48)[0])
    target_spec: SceneSpec = field(default_factory=lambda: toy_specs(48)[1])
    layout: PairLayout = field(default_factory=PairLayout)
    net: NetConfig = field(default_factory=lambda: toy_configs(48)[1])
    train: TrainConfig = field(default_factory=lambda: toy_configs(48)[0])
    summer_analysis: int = 4
    consecutive_length: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
        size = int(d.get("size", 48))
        src, tgt = toy_specs(size)
        cfg, net = toy_configs(size)
        out = cls(size=size, source_spec=src, target_spec=tgt, net=net, train=cfg,
                  layout=PairLayout(n_target_train=40, melange_widths=(max(4, size // 12), max(6, size // 4))))
        nested = {
            "source_spec": (SceneSpec.to_dict, SceneSpec.from_dict),
            "target_spec": (SceneSpec.to_dict, SceneSpec.from_dict),
            "layout": (asdict, _layout_from_dict),
            "net": (NetConfig.to_dict, NetConfig.from_dict),
            "train": (TrainConfig.to_dict, TrainConfig.from_dict),
        }
        for k, v in d.items():
            if k in nested:
                try:
                    v = _merge(getattr(out, k), v, *nested[k])
                except TypeError as exc:
                    raise ValidationError(f"config section {k!r}: {exc}") from exc
            setattr(out, k, v)
        out.validate()
        return out

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.policy not in (None, CONSECUTIVE, SUMMER_REFERENCE):
            raise ValidationError(f"unknown policy {self.policy!r}")
        if self.members is not None and self.members < 1:
            raise ValidationError("--members must be >= 1")

    def setup(self) -> Setup:
        consecutive = SeriesPolicy.consecutive(self.consecutive_length)
        summer = SeriesPolicy.summer_reference(self.summer_analysis)
        s = experiment_setup(self.experiment, consecutive, summer)
        if self.policy is not None:
            s = replace(s, policy=consecutive if self.policy == CONSECUTIVE else summer)
        if self.rock_mask is not None:
            s = replace(s, rock_mask=self.rock_mask)
        if self.members is not None:
            s = replace(s, members=self.members)
        return s

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["source_spec"] = self.source_spec.to_dict()
        d["target_spec"] = self.target_spec.to_dict()
        d["layout"] = asdict(self.layout)
        d["net"] = self.net.to_dict()
        d["train"] = self.train.to_dict()
        d["resolved_setup"] = self.setup().describe()
        return d


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    os.replace(tmp, path)
    return path


def _json_default(o):
    if isinstance(o, (frozenset, set, tuple)):
        return sorted(o) if isinstance(o, (frozenset, set)) else list(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def resolve_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    flag_map = {"experiment": "experiment", "seed": "seed", "members": "members", "policy": "policy",
                "out": "out", "data_root": "data_root", "size": "size"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    if getattr(args, "rock_mask", None) is not None:
        d["rock_mask"] = args.rock_mask == "on"
    if d.get("data_root") is None and os.environ.get(DATA_ROOT_ENV):
        d["data_root"] = os.environ[DATA_ROOT_ENV]
    return RunConfig.from_dict(d)


def _data_root(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise ValidationError(f"no data root: pass --data-root, set data_root in the config or ${DATA_ROOT_ENV}")
    return Path(cfg.data_root)


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    root = Path(cfg.data_root or cfg.out)
    source, target = generate_domain_pair(cfg.source_spec, cfg.target_spec, cfg.layout, cfg.seed)
    write_domain(source, root / "source")
    write_domain(target, root / "target")
    _dump(cfg.to_dict(), root / "run_config.json")
    for name, ds in (("source", source), ("target", target)):
        counts = {s: len(ds.manifest(s)) for s in ds.manifests}
        print(f"{name}: {len(ds.glaciers)} glaciers, labelled frames per split {counts}")
    return 0


def cmd_rockmask(args) -> int:
    frame = rasters.read_float(args.grid) if args.grid else None
    if frame is None and not (args.height and args.width):
        raise ValidationError("give --grid FRAME.tif or both --height and --width")
    H, W = frame.shape if frame is not None else (args.height, args.width)
    sets = load_polygons(args.polygons)
    origin = tuple(float(v) for v in args.origin.split(","))
    if len(origin) != 2:
        raise ValidationError("--origin must be 'x,y'")
    mask = rock_mask_from_polygons(sets, origin, args.spacing, H, W, args.glacier_id or Path(args.polygons).stem)
    if args.edits:
        mask = refine_near_front(mask, load_edits(args.edits))
    out = Path(args.out)
    rasters.write_mask(out, mask.mask)
    save_edits(mask, out.with_suffix(".edits.json"))
    print(f"{out}: {int(mask.mask.sum())} rock pixels of {H * W}")
    return 0


def _policy(name: str, length: int | None) -> SeriesPolicy:
    if name == CONSECUTIVE:
        return SeriesPolicy.consecutive(length or 8)
    if name == SUMMER_REFERENCE:
        return SeriesPolicy.summer_reference(length or 4)
    raise ValidationError(f"unknown policy {name!r}")


def cmd_compose(args) -> int:
    manifest_path = Path(args.manifest)
    domain = read_domain(manifest_path.parent)
    manifest = domain.manifest if manifest_path.name == "manifest.json" else load_manifest(manifest_path)
    if args.split:
        manifest = manifest.subset(args.split)
    policy = _policy(args.policy or CONSECUTIVE, args.length)
    out = Path(args.out)
    base = out.parent.resolve()
    frames: dict[str, list] = {}
    for f in domain.pool:
        frames.setdefault(f.glacier_id, []).append(f)
    for e in manifest:
        group = frames.setdefault(e.frame.glacier_id, [])
        if not any(f.name == e.frame.name for f in group):
            group.append(e.frame)
    entries = manifest.label_matched() if args.anchors == "matched" else manifest.entries
    records, skipped = [], []
    for e in sorted(entries, key=lambda e: e.frame.name):
        group = frames[e.frame.glacier_id]
        idx = next(i for i, f in enumerate(group) if f.name == e.frame.name)
        try:
            s = compose(group, idx, policy, avoid_anchor=True)
        except ValidationError as exc:
            skipped.append(f"{e.frame.name}: {exc}")
            continue
        rock = domain.root / "rockmasks" / f"{e.frame.glacier_id}.png"
        records.append({
            "anchor": e.frame.name,
            "anchor_position": s.anchor,
            "glacier_id": e.frame.glacier_id,
            "frames": [f.name for f in s.frames],
            "frame_paths": [os.path.relpath(Path(f.path).resolve(), base) for f in s.frames],
            "roles": s.roles,
            "retain": s.retain,
            "rock_mask": os.path.relpath(rock.resolve(), base) if rock.is_file() else None,
        })
    for msg in skipped:
        log.warning("skipped anchor %s", msg)
    _dump({"policy": policy.to_dict(), "series": records}, out)
    print(f"{out}: {len(records)} series ({len(skipped)} anchors skipped)")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    setup = cfg.setup()
    root = _data_root(cfg)
    source = read_domain(root / "source")
    target = read_domain(root / "target")
    out = Path(cfg.out)
    pool = source.pool + target.pool
    masks = {**source.rock_masks, **target.rock_masks} if setup.rock_mask else None
    if setup.rock_mask and not masks:
        raise DataError(f"rock mask requested but no rockmasks/ directory under {root}")
    _dump(cfg.to_dict(), out / "run_config.json")
    ckpts = train_setup(setup, source.split("train"), target.split("train"), target.split("val"),
                        cfg.train, cfg.net, cfg.seed, pool=pool, rock_masks=masks, log_dir=out / "logs")
    for c in ckpts:
        path = save_checkpoint(c, out / "checkpoints" / f"{c.name}.pt")
        print(f"{path}: epoch {c.meta['epoch']}, val IoU {c.meta['best_val_iou']:.4f}")
    return 0


def _series_input(rec: dict, base: Path, with_rock: bool) -> torch.Tensor:
    x = np.stack([prepare_intensity(rasters.read_float(base / p)) for p in rec["frame_paths"]])[:, None]
    if with_rock:
        if not rec.get("rock_mask"):
            raise DataError(f"series {rec['anchor']}: checkpoint needs a rock mask but the index has none")
        m = rasters.read_mask(base / rec["rock_mask"]).astype(np.float32)
        x = np.concatenate([x, np.broadcast_to(m, (x.shape[0], 1, *m.shape))], axis=1)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def cmd_predict(args) -> int:
    members = [load_checkpoint(p) for p in args.checkpoint]
    series_path = Path(args.series)
    if not series_path.is_file():
        raise DataError(f"series index not found: {series_path}")
    index = json.loads(series_path.read_text())
    base = series_path.parent
    out = Path(args.out)
    with_rock = members[0].config.in_channels == 2
    frac = members[0].config.crop_fraction
    preds = {}
    for rec in index["series"]:
        x = _series_input(rec, base, with_rock)
        name = rec["anchor"]
        series = ComposedSeries(rec["frames"], rec["roles"], rec["retain"], rec["anchor_position"])
        entry = {}
        if len(members) == 1:
            model = members[0].build()
            dtype = next(model.parameters()).dtype
            with torch.no_grad():
                logits = retain_central(model(x.to(dtype)), frac)[rec["anchor_position"]]
            zones = logits.argmax(0).numpy().astype(np.uint8)
        else:
            res = ensemble_predict(members, series, x)
            k = series.analysis_positions.index(rec["anchor_position"])
            zones = res.zones[k]
            entry["uncertainty"] = {}
            for c, cname in enumerate(CLASS_NAMES):
                p = rasters.write_float(out / "uncertainty" / f"{name}_{cname}.tif",
                                        res.uncertainty[k, c].astype(np.float32))
                entry["uncertainty"][cname] = os.path.relpath(p, out)
        p = rasters.write_labels(out / "zones" / f"{name}.png", zones)
        entry["zones"] = os.path.relpath(p, out)
        preds[name] = entry
    _dump({"crop_fraction": frac, "members": sorted(m.name for m in members), "predictions": preds},
          out / "predictions.json")
    print(f"{out}: {len(preds)} predictions from {len(members)} member(s)")
    return 0


def _load_predictions(pred_dir: Path) -> tuple[dict, float, dict]:
    index_path = pred_dir / "predictions.json"
    if not index_path.is_file():
        raise DataError(f"prediction index not found: {index_path}")
    index = json.loads(index_path.read_text())
    zones = {}
    for name, entry in index["predictions"].items():
        zones[name] = rasters.read_labels(pred_dir / entry["zones"])
    return zones, float(index["crop_fraction"]), index


def _manifest_for(args) -> DatasetManifest:
    m = load_manifest(args.manifest)
    return m.subset(args.split) if args.split else m


def cmd_eval(args) -> int:
    manifest = _manifest_for(args)
    reports = []
    for d in args.predictions:
        zones, frac, _ = _load_predictions(Path(d))
        reports.append(evaluate(zones, manifest, frac))
    result = reports[0] if len(reports) == 1 else aggregate_runs(reports)
    table = render_table({args.name: result})
    out = Path(args.out)
    payload = {"runs": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        payload["aggregate"] = {"mean": result.mean, "std": result.std, "n_runs": result.n_runs}
    _dump(_nan_to_none(payload), out / "report.json")
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def _nan_to_none(o):
    if isinstance(o, float) and math.isnan(o):
        return None
    if isinstance(o, dict):
        return {k: _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_nan_to_none(v) for v in o]
    return o


def cmd_plot(args) -> int:
    manifest = _manifest_for(args)
    pred_dir = Path(args.predictions)
    zones, frac, index = _load_predictions(pred_dir)
    out = Path(args.out)
    known = manifest.by_name()
    written = 0
    for name in sorted(zones):
        if name not in known:
            raise DataError(f"prediction {name} is not in the manifest")
        e = known[name]
        spacing = e.frame.pixel_spacing
        pred = zones[name]
        truth = central_crop(e.annotation.zones, frac)
        truth_front = central_crop(e.annotation.front.mask, frac)
        pred_front = extract_front(pred, spacing).mask
        background = figures.gray_background(central_crop(e.frame.intensity, frac))
        figures.write_rgb(out / f"{name}_zones.png", figures.zone_panel(pred))
        figures.write_rgb(out / f"{name}_truth.png", figures.zone_panel(truth))
        figures.write_rgb(out / f"{name}_overlay.png",
                          figures.front_overlay(pred_front, truth_front, args.radius, background))
        unc = index["predictions"][name].get("uncertainty")
        if unc:
            stds = [rasters.read_float(pred_dir / unc[c]) for c in CLASS_NAMES]
            vmax = max(float(s.max()) for s in stds)
            panels = [figures.front_overlay(pred_front, truth_front, args.radius, figures.zone_panel(pred))]
            for cname, s in zip(CLASS_NAMES, stds):
                panel = figures.uncertainty_panel(s, vmax)
                figures.write_rgb(out / f"{name}_uncertainty_{cname}.png", panel)
                panels.append(panel)
            figures.write_rgb(out / f"{name}_uncertainty.png", figures.hstack_panels(panels))
        written += 1
    print(f"{out}: figures for {written} frame(s)")
    return 0


def cmd_trend(args) -> int:
    from .experiments import build_benchmark, run_trend

    cfg = resolve_config(args)
    bench = build_benchmark(cfg.seed, cfg.size)
    seeds = tuple(range(cfg.seed, cfg.seed + args.seeds))
    res = run_trend(seeds, bench, cfg.size, cfg=cfg.train, net=cfg.net)
    out = Path(cfg.out)
    rows = {tag: aggregate_runs(reports) for tag, reports in res.reports.items()}
    table = render_table(rows)
    medians = {tag: res.median(tag) for tag in res.reports}
    _dump(_nan_to_none({"seeds": list(seeds), "seconds": res.seconds, "median_mde": medians,
                        "runs": {t: [r.to_dict()["summary"] for r in rs] for t, rs in res.reports.items()}}),
          out / "trend.json")
    (out / "table.txt").write_text(table + "\n")
    print(table)
    print("median MDE:", ", ".join(f"{t} {m:.1f}" for t, m in medians.items()))
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--experiment", choices=EXPERIMENTS)
    common.add_argument("--seed", type=int)
    common.add_argument("--members", type=int)
    common.add_argument("--policy", choices=(CONSECUTIVE, SUMMER_REFERENCE))
    common.add_argument("--rock-mask", choices=("on", "off"))
    common.add_argument("--out")
    common.add_argument("--data-root", help=f"dataset root (default ${DATA_ROOT_ENV})")
    common.add_argument("--size", type=int, help="synthetic grid size")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="calfront", description="Calving-front segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic source/target dataset")

    s = sub.add_parser("rockmask", parents=[common], help="rasterize a rock mask from polygons")
    s.add_argument("--polygons", required=True, help="GeoJSON with coastline/glacier_outline/glacier_tongue")
    s.add_argument("--grid", help="frame raster defining the grid shape")
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--origin", default="0,0", help="upper-left corner 'x,y' in metres")
    s.add_argument("--spacing", type=float, required=True)
    s.add_argument("--glacier-id")
    s.add_argument("--edits", help="JSON list of [row, col] toggles")

    s = sub.add_parser("compose", parents=[common], help="write a series index for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--length", type=int, help="series length (consecutive) or analysis count (summer)")
    s.add_argument("--anchors", choices=("matched", "labelled"), default="matched")

    sub.add_parser("train", parents=[common], help="train one experiment configuration")

    s = sub.add_parser("predict", parents=[common], help="predict zones for a series index")
    s.add_argument("--checkpoint", nargs="+", required=True)
    s.add_argument("--series", required=True)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    s.add_argument("--predictions", nargs="+", required=True, help="one prediction directory per run")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--name", default="model")

    s = sub.add_parser("plot", parents=[common], help="zone, front overlay and uncertainty figures")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--radius", type=int, default=3, help="front dilation radius in pixels")

    s = sub.add_parser("trend", parents=[common], help="run the four-experiment chain over several seeds")
    s.add_argument("--seeds", type=int, default=5)
    return p


COMMANDS = {
    "synth": cmd_synth, "rockmask": cmd_rockmask, "compose": cmd_compose, "train": cmd_train,
    "predict": cmd_predict, "eval": cmd_eval, "plot": cmd_plot, "trend": cmd_trend,
}
NEEDS_OUT = {"rockmask", "compose", "predict", "eval", "plot"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in NEEDS_OUT and not args.out:
            raise ValidationError(f"{args.command}: --out is required")
        return COMMANDS[args.command](args)
    except CalfrontError as exc:
        print(f"calfront {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
