"""Acceptance checks. Each test records one PASS/FAIL line, shown after the run."""
import datetime as dt
import json
import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from shapely.geometry import box

import oracles
from calfront import rasters
from calfront.adapt import predict_anchors
from calfront.cli import CLASS_NAMES, main
from calfront.composer import ANALYSIS, SeriesPolicy, compose
from calfront.datamodel import DatasetManifest, FrontMask
from calfront.ensemble import combine_logits, ensemble_predict
from calfront.experiments import _test_set, build_benchmark, experiment_setup, run_trend
from calfront.figures import BLUE, PINK, YELLOW, colour_counts, dilate, front_overlay, read_rgb
from calfront.frontops import central_crop, evaluate, extract_front, iou, mde
from calfront.net import NetConfig, TemporalSegNet, checkpoint_from, retain_central, segmentation_loss
from calfront.rockmask import PolygonSet, build_glacier_area, build_rock_region, rasterize
from calfront.synthgen import write_domain
from conftest import ACCEPTANCE_LINES
from test_composer import random_calendar
from test_frontops import manifest_of, random_maps
from test_rockmask import outlines, random_rects, sq


def record(name: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def rel_err(got, want):
    if want is None or got is None:
        return 0.0 if got is want else math.inf
    if math.isnan(want) or math.isnan(got):
        return 0.0 if math.isnan(want) and math.isnan(got) else math.inf
    return abs(got - want) / max(abs(want), 1e-300) if want else abs(got)


# --- metrics --------------------------------------------------------------------------

def test_metric_oracle_equivalence():
    t0 = time.perf_counter()
    maps = list(random_maps(400, seed=21))
    fronts_ok, worst, n = True, 0.0, 0
    for a, b in zip(maps[::2], maps[1::2]):
        n += 1
        fa, fb = extract_front(a, 10.0), extract_front(b, 10.0)
        pa, pb = oracles.front_pixels(a.tolist()), oracles.front_pixels(b.tolist())
        fronts_ok &= {tuple(p) for p in fa.coords} == pa and {tuple(p) for p in fb.coords} == pb
        if pb:
            worst = max(worst, rel_err(mde(fa, fb), oracles.symmetric_mde(pa, pb, 10.0)))
        res = iou(a, b)
        for k, cname in enumerate(CLASS_NAMES):
            worst = max(worst, rel_err(res[cname], oracles.class_iou(a.tolist(), b.tolist(), k)))
    secs = time.perf_counter() - t0
    ok = n == 200 and fronts_ok and worst <= 1e-9 and secs < 10
    record("metric oracle equivalence", ok,
           f"{n} pairs, fronts identical={fronts_ok}, max rel err {worst:.1e}, {secs:.2f} s")


def test_known_shift_mde():
    worst = 0.0
    for k in range(1, 6):
        for s in (7.0, 10.0, 20.0):
            a = np.zeros((30, 30), bool)
            b = np.zeros((30, 30), bool)
            a[:, 10] = True
            b[:, 10 + k] = True
            want = oracles.symmetric_mde({tuple(p) for p in np.argwhere(b)}, {tuple(p) for p in np.argwhere(a)}, s)
            got = mde(FrontMask(b, s), FrontMask(a, s))
            worst = max(worst, abs(got - k * s), abs(want - k * s))
    record("known-shift MDE", worst == 0.0, f"15 cases, max |mde - k*s| = {worst:g}")


def test_bookkeeping_conservation():
    rng = np.random.default_rng(5)
    checked, bad = 0, 0
    for trial in range(50):
        n = int(rng.integers(1, 12))
        truths = []
        for _ in range(n):
            z = np.full((16, 16), 1, np.uint8)
            c = int(rng.integers(3, 13))
            z[2:14, :c] = 2
            z[2:14, c:] = 3
            truths.append(z)
        matched = [bool(rng.random() < 0.8) for _ in range(n)]
        matched[0] = True
        m = manifest_of(truths, matched)
        preds = {}
        for i, z in enumerate(truths):
            kind = rng.integers(3)
            preds[f"f{i}"] = z if kind == 0 else np.full_like(z, 2) if kind == 1 else np.roll(z, 2, axis=1)
        rep = evaluate(preds, m)
        checked += 1
        bad += len(rep.evaluated) + rep.n_missing != len(m.label_matched())
    record("bookkeeping conservation", bad == 0, f"{checked} evaluation runs, {bad} violations")


# --- geometry -------------------------------------------------------------------------

def test_geometry_identities_and_rasterization_bound():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        rects = random_rects(rng, int(rng.integers(1, 7)))
        tongues = random_rects(rng, int(rng.integers(0, 4)))
        land_rects = random_rects(rng, int(rng.integers(1, 4)))
        glacier = build_glacier_area(outlines(*rects), PolygonSet([sq(*r) for r in tongues], "glacier_tongue"))
        union = oracles.rect_union_area(rects + tongues)
        worst = max(worst, rel_err(glacier.area, union))
        rock = build_rock_region(PolygonSet([sq(*r) for r in land_rects], "coastline"), glacier)
        land = oracles.rect_union_area(land_rects)
        inter = land + union - oracles.rect_union_area(land_rects + rects + tongues)
        want = land - inter
        worst = max(worst, abs(rock.area - want) / max(want, 1.0))
    # rasterization error against the perimeter * spacing bound
    excess = -math.inf
    for _ in range(100):
        x0, y0 = rng.uniform(0, 20, 2)
        w, h = rng.uniform(0.5, 15, 2)
        spacing = float(rng.choice([0.25, 0.5, 1.0, 2.0]))
        n = int(math.ceil(40 / spacing))
        m = rasterize(box(x0, y0, x0 + w, y0 + h), (0.0, n * spacing), spacing, n, n).mask
        err = abs(m.sum() * spacing**2 - w * h)
        excess = max(excess, err - 2 * (w + h) * spacing)
    ok = worst <= 1e-9 and excess <= 0
    record("geometry identities and rasterization bound", ok,
           f"100 arrangements, max rel area err {worst:.1e}; 100 rasterizations, max (err - bound) {excess:.2f}")


# --- composer -------------------------------------------------------------------------

def test_composer_calendar_properties():
    rng = random.Random(17)
    policy = SeriesPolicy.summer_reference()
    t0 = time.perf_counter()
    failures = 0
    for _ in range(1000):
        year, frames = random_calendar(rng)
        cands = [i for i, f in enumerate(frames) if f.date.year == year and f.date.month < 7]
        a = rng.choice(cands)
        s = compose(frames, a, policy)
        refs = [f for f, r in zip(s.frames, s.roles) if r != ANALYSIS]
        good = [(f.date.year, f.date.month) for f in refs] == [(year, 7), (year, 8), (year, 9)]
        good &= len(s) == policy.n_references + policy.n_analysis
        good &= len({id(f) for f in s.frames}) == len(s)
        shuffled = list(frames)
        rng.shuffle(shuffled)
        again = compose(shuffled, shuffled.index(frames[a]), policy)
        good &= [f.date for f in again.frames] == [f.date for f in s.frames] and again.anchor == s.anchor
        failures += not good
    secs = time.perf_counter() - t0
    record("composer calendar properties", failures == 0 and secs < 30,
           f"1000 calendars, {failures} failures, {secs:.2f} s")


# --- network --------------------------------------------------------------------------

def test_gradient_check():
    cfg = NetConfig(height=16, width=16, length=2, widths=(4, 6, 8, 8), temporal_hidden=(4, 4, 4))
    torch.manual_seed(1)
    m = TemporalSegNet(cfg).double().train()
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(2, 1, 16, 16, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 4, (2, 8, 8), generator=gen)
    m.zero_grad()
    segmentation_loss(m(x), y, 0.5).backward()
    params = list(m.parameters())
    rng = np.random.default_rng(3)
    h, worst = 1e-4, 0.0
    for _ in range(20):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = segmentation_loss(m(x), y, 0.5).item()
            p[idx] = orig - h
            down = segmentation_loss(m(x), y, 0.5).item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        worst = max(worst, abs(analytic - numeric) / scale if scale else 0.0)
    record("gradient check", worst <= 1e-3, f"20 parameters, float64, max rel err {worst:.1e}")


def test_temporal_mechanism():
    cfg = NetConfig(height=32, width=32, length=3, widths=(8, 8, 16, 16), temporal_hidden=(4, 6, 8))
    x = torch.randn(3, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    y = x.clone()
    y[0] += torch.randn(1, 32, 32, generator=torch.Generator().manual_seed(1))
    effects = []
    for temporal in (True, False):
        torch.manual_seed(4)
        m = TemporalSegNet(NetConfig(**{**cfg.to_dict(), "temporal": temporal})).eval()
        with torch.no_grad():
            d = (retain_central(m(x), 0.5)[1:] - retain_central(m(y), 0.5)[1:]).abs().max().item()
        effects.append(d)
    record("temporal mechanism", effects[0] > 1e-6 and effects[1] == 0.0,
           f"cross-frame effect {effects[0]:.2e} with temporal units, {effects[1]:g} ablated")


# --- ensemble -------------------------------------------------------------------------

def test_ensemble_contracts():
    cfg = NetConfig(height=32, width=32, length=4, widths=(4, 4, 8, 8), temporal_hidden=(4, 4, 4))

    def member(seed):
        torch.manual_seed(seed)
        return checkpoint_from(TemporalSegNet(cfg), seed=seed, name=f"m{seed}")

    x = torch.randn(4, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    same = ensemble_predict([member(0)] * 5, None, x)
    zero_std = float(np.abs(same.uncertainty).max())
    logits = np.zeros((5, 1, 4, 2, 2))
    logits[4, 0, 1, 0, 1] = 2.0
    example = float(combine_logits(logits)[2][0, 1, 0, 1])
    members = [member(s) for s in range(5)]
    ref = ensemble_predict(members, None, x)
    perm_ok = True
    for order in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        out = ensemble_predict([members[i] for i in order], None, x)
        perm_ok &= np.array_equal(out.zones, ref.zones) and np.array_equal(out.uncertainty, ref.uncertainty)
    ok = zero_std == 0.0 and abs(example - 0.8) <= 1e-12 and perm_ok
    record("ensemble contracts", ok,
           f"identical members max std {zero_std:g}; example std {example:.12f}; permutation exact={perm_ok}")


# --- synthetic trend ------------------------------------------------------------------

TAGS = ("baseline", "few_shot", "summer_ref", "rock_mask")
SEEDS = (0, 1, 2, 3, 4)
BUDGET_S = 30 * 60


@pytest.fixture(scope="module")
def benchmark():
    return build_benchmark(0, 48)


@pytest.fixture(scope="module")
def trend(benchmark):
    return run_trend(SEEDS, benchmark, 48, TAGS)


def _is_winter(d: dt.date) -> bool:
    return d.month in (12, 1, 2)


def test_trend_reproduction(benchmark, trend):
    test_frames = len(benchmark.target.manifest("test").label_matched())
    winter = [a for g in benchmark.target.glaciers for a in g.acquisitions if _is_winter(a.date)]
    melange = sum(a.melange for a in winter) / len(winter)
    medians = [trend.median(t) for t in TAGS]
    ordered = all(a > b for a, b in zip(medians, medians[1:]))
    ratio = medians[-1] / medians[0]
    rock_iou = float(np.median([r.class_iou("rock") for r in trend.reports["rock_mask"]]))
    ok = (test_frames >= 20 and melange >= 0.5 and ordered and ratio <= 0.5 and rock_iou >= 0.95
          and trend.seconds <= BUDGET_S)
    chain = " > ".join(f"{t} {m:.1f}" for t, m in zip(TAGS, medians))
    record("trend reproduction", ok,
           f"{test_frames} test frames, melange on {melange:.0%} of winter frames; median MDE {chain}; "
           f"final/baseline {ratio:.2f}; median rock IoU {rock_iou:.3f}; {trend.seconds / 60:.1f} min")


def test_missing_front_trend(trend):
    base = [r.n_missing for r in trend.reports["baseline"]]
    rock = [r.n_missing for r in trend.reports["rock_mask"]]
    wins = sum(r <= b for r, b in zip(rock, base))
    record("missing-front trend", wins >= 4, f"rock_mask <= baseline in {wins}/5 seeds (baseline {base}, rock_mask {rock})")


def test_rock_channel_is_used(benchmark, trend):
    # zeroing the rock channel of a rock-aware model changes its predictions
    model = trend.checkpoints["rock_mask"][0][0].build().eval()
    test = _test_set(benchmark, experiment_setup("rock_mask"))
    blank = replace(test, rock=np.zeros_like(test.rock))
    a = predict_anchors(model, test, True)[0]
    b = predict_anchors(model, blank, True)[0]
    changed = sum(int((a[n] != b[n]).sum()) for n in a)
    assert changed > 0


# --- figures --------------------------------------------------------------------------

def _overlay_cases():
    line = _col
    ok = True
    f = line(8)
    img = front_overlay(f, f, radius=2)
    painted = np.any(img != 0, axis=-1)
    ok &= np.array_equal(painted, dilate(f, 2)) and (img[painted] == PINK).all()
    p, t = line(3), line(15)
    img = front_overlay(p, t, radius=2)
    ok &= (img[dilate(p, 2)] == YELLOW).all() and (img[dilate(t, 2)] == BLUE).all()
    ok &= np.array_equal(np.any(img != 0, axis=-1), dilate(p, 2) | dilate(t, 2))
    p, t = line(5), line(6, slice(2, 18))
    img = front_overlay(p, t, radius=0)
    ok &= colour_counts(img) == {"yellow": int((p & ~t).sum()), "blue": int((t & ~p).sum()), "pink": int((p & t).sum())}
    ok &= np.array_equal(np.any(img != 0, axis=-1), p | t)
    return ok


def _col(col, rows=slice(4, 16)):
    m = np.zeros((20, 20), bool)
    m[rows, col] = True
    return m


def test_figure_emission(small_pair, tmp_path):
    _, tgt = small_pair
    manifest_path = write_domain(tgt, tmp_path / "data")
    manifest = DatasetManifest(tgt.manifest("test").label_matched())
    pred = tmp_path / "pred"
    index = {}
    rng = np.random.default_rng(0)
    for e in manifest:
        name = e.frame.name
        rasters.write_labels(pred / "zones" / f"{name}.png", central_crop(e.annotation.zones, 0.5))
        unc = {}
        for c in CLASS_NAMES:
            rasters.write_float(pred / "uncertainty" / f"{name}_{c}.tif", rng.random((16, 16)))
            unc[c] = f"uncertainty/{name}_{c}.tif"
        index[name] = {"zones": f"zones/{name}.png", "uncertainty": unc}
    (pred / "predictions.json").write_text(json.dumps({"crop_fraction": 0.5, "predictions": index}))
    code = main(["plot", "--predictions", str(pred), "--manifest", str(manifest_path),
                 "--radius", "1", "--out", str(tmp_path / "fig")])
    fig = tmp_path / "fig"
    ok = code == 0
    for name in index:
        overlay = read_rgb(fig / f"{name}_overlay.png")
        counts = colour_counts(overlay)
        ok &= counts["pink"] > 0 and counts["yellow"] == 0 and counts["blue"] == 0
        ok &= all((fig / f"{name}_uncertainty_{c}.png").exists() for c in CLASS_NAMES)
        ok &= (fig / f"{name}_uncertainty.png").exists()
    cases = _overlay_cases()
    record("figure emission", ok and cases,
           f"exit {code}, {len(index)} frame(s) with overlay and 4 per-class uncertainty panels; "
           f"three overlay cases pixel-exact={cases}")
