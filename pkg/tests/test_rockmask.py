import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import Polygon, box

import oracles
from calfront.errors import DataError, ValidationError
from calfront.rockmask import (
    PolygonSet, RockMask, build_glacier_area, build_rock_region, load_edits, load_polygons,
    mask_to_region, rasterize, refine_near_front, rock_mask_from_polygons, save_edits, save_polygons,
)

EMPTY_TONGUES = PolygonSet([], "glacier_tongue")


def sq(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def outlines(*rects):
    return PolygonSet([sq(*r) for r in rects], "glacier_outline")


# --- polygon sets ------------------------------------------------------------------

def test_polygon_validation_names_index():
    bowtie = [(0, 0), (1, 1), (1, 0), (0, 1)]
    with pytest.raises(ValidationError, match="polygon 1"):
        PolygonSet([sq(0, 0, 1, 1), bowtie], "coastline")
    with pytest.raises(ValidationError, match="polygon 0"):
        PolygonSet([[(0, 0), (1, 1), (0, 0)]], "coastline")
    with pytest.raises(ValidationError, match="polygon 0"):
        PolygonSet([[(0, 0), (np.inf, 0), (0, 1)]], "coastline")
    with pytest.raises(ValidationError, match="tag"):
        PolygonSet([sq(0, 0, 1, 1)], "lake")


# --- area identities ----------------------------------------------------------------

def test_union_examples():
    assert build_glacier_area(outlines((0, 0, 1, 1), (5, 5, 6, 6)), EMPTY_TONGUES).area == 2
    assert build_glacier_area(outlines((0, 0, 1, 1), (0, 0, 1, 1)), EMPTY_TONGUES).area == 1
    area = build_glacier_area(outlines((0, 0, 2, 2)), PolygonSet([sq(1, 1, 3, 3)], "glacier_tongue")).area
    assert area == 7


def test_rock_region_examples():
    land = PolygonSet([sq(0, 0, 10, 10)], "coastline")
    assert build_rock_region(land, Polygon()).area == 100
    assert build_rock_region(land, box(-1, -1, 11, 11)).is_empty
    assert build_rock_region(land, box(3, 3, 7, 7)).area == 84
    with pytest.raises(ValidationError):
        build_rock_region(PolygonSet([], "coastline"), Polygon())


def random_rects(rng, n):
    out = []
    for _ in range(n):
        x0, y0 = rng.integers(0, 40, 2)
        w, h = rng.integers(1, 20, 2)
        out.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
    return out


def test_area_identities_random_arrangements():
    rng = np.random.default_rng(11)
    for _ in range(100):
        rects = random_rects(rng, int(rng.integers(1, 7)))
        tongues = random_rects(rng, int(rng.integers(0, 4)))
        land_rects = random_rects(rng, int(rng.integers(1, 4)))
        glacier = build_glacier_area(outlines(*rects), PolygonSet([sq(*r) for r in tongues], "glacier_tongue"))
        want = oracles.rect_union_area(rects + tongues)
        assert glacier.area == pytest.approx(want, rel=1e-9)
        assert glacier.area <= sum((r[2] - r[0]) * (r[3] - r[1]) for r in rects + tongues) + 1e-9

        land = PolygonSet([sq(*r) for r in land_rects], "coastline")
        rock = build_rock_region(land, glacier)
        land_area = oracles.rect_union_area(land_rects)
        # land ∩ glacier by the oracle: union(land) + union(glacier) - union(both)
        inter = land_area + want - oracles.rect_union_area(land_rects + rects + tongues)
        assert rock.area == pytest.approx(land_area - inter, rel=1e-9, abs=1e-9)


# --- rasterization ------------------------------------------------------------------

def test_rasterize_examples():
    assert rasterize(Polygon(), (0, 10), 1.0, 10, 10).mask.sum() == 0
    assert rasterize(box(-1, -1, 11, 11), (0, 10), 1.0, 10, 10).mask.all()
    m = rasterize(box(2, 0, 6, 10), (0, 10), 1.0, 10, 10).mask
    assert np.array_equal(np.nonzero(m.any(axis=0))[0], [2, 3, 4, 5]) and m[:, 2:6].all()
    with pytest.raises(ValidationError):
        rasterize(box(0, 0, 1, 1), (0, 0), 0.0, 4, 4)
    with pytest.raises(ValidationError):
        rasterize(box(0, 0, 1, 1), (0, 0), 1.0, 0, 4)


def test_rasterize_matches_centre_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x0, x1 = sorted(rng.uniform(-2, 22, 2))
        y0, y1 = sorted(rng.uniform(-2, 22, 2))
        spacing = float(rng.choice([0.5, 1.0, 1.7]))
        origin = (float(rng.uniform(-1, 1)), 20.0)
        got = rasterize(box(x0, y0, x1, y1), origin, spacing, 24, 24).mask
        want = np.array(oracles.rect_center_mask((x0, y0, x1, y1), origin, spacing, 24, 24))
        assert np.array_equal(got, want)


def test_rasterize_handles_holes_and_multipolygons():
    ring = box(0, 0, 10, 10).difference(box(3, 3, 7, 7))
    m = rasterize(ring, (0, 10), 1.0, 10, 10).mask
    assert m.sum() == 84 and not m[3:7, 3:7].any()
    multi = box(0, 0, 2, 10).union(box(5, 0, 7, 10))
    m = rasterize(multi, (0, 10), 1.0, 10, 10).mask
    assert m.sum() == 40


@pytest.mark.parametrize("spacing", [2.0, 1.0, 0.5, 0.25, 0.1])
def test_rasterized_area_converges(spacing):
    rect = (1.3, 0.7, 8.9, 6.2)
    area = (rect[2] - rect[0]) * (rect[3] - rect[1])
    perim = 2 * ((rect[2] - rect[0]) + (rect[3] - rect[1]))
    n = int(np.ceil(12 / spacing))
    m = rasterize(box(*rect), (0.0, n * spacing), spacing, n, n).mask
    assert abs(m.sum() * spacing**2 - area) <= perim * spacing


@given(st.lists(st.tuples(st.floats(0, 15), st.floats(0, 15), st.floats(0.2, 8), st.floats(0.2, 8)),
                min_size=1, max_size=4), st.floats(0.3, 2.0))
def test_rasterize_monotone(parts, spacing):
    rects = [box(x, y, x + w, y + h) for x, y, w, h in parts]
    a = rects[0]
    b = build_glacier_area(PolygonSet(rects, "glacier_outline"), EMPTY_TONGUES)
    ma = rasterize(a, (0, 20), spacing, 30, 30).mask
    mb = rasterize(b, (0, 20), spacing, 30, 30).mask
    assert (ma <= mb).all()


def test_mask_region_round_trip():
    rng = np.random.default_rng(0)
    mask = (rng.random((12, 15)) < 0.4).astype(np.uint8)
    region = mask_to_region(mask, 30.0, (100.0, 500.0))
    assert region.area == pytest.approx(mask.sum() * 900)
    assert np.array_equal(rasterize(region, (100.0, 500.0), 30.0, 12, 15).mask, mask)


# --- edits and files ----------------------------------------------------------------

def test_refine_examples():
    m = RockMask(np.zeros((5, 5)), "G1")
    assert np.array_equal(refine_near_front(m, []).mask, m.mask)
    one = refine_near_front(m, [(2, 3)])
    assert one.mask.sum() == 1 and one.edits == [(2, 3)]
    assert np.array_equal(refine_near_front(one, [(2, 3)]).mask, m.mask)
    with pytest.raises(ValidationError):
        refine_near_front(m, [(5, 0)])


def test_edit_log_replay(tmp_path):
    m = RockMask(np.zeros((6, 6)), "G1")
    edited = refine_near_front(refine_near_front(m, [(0, 0), (1, 2)]), [(5, 5)])
    path = save_edits(edited, tmp_path / "edits.json")
    replayed = refine_near_front(m, load_edits(path))
    assert np.array_equal(replayed.mask, edited.mask)


def test_polygon_file_round_trip(tmp_path):
    sets = {
        "glacier_outline": outlines((2, 2, 6, 8)),
        "glacier_tongue": PolygonSet([sq(5, 3, 8, 7)], "glacier_tongue"),
        "coastline": PolygonSet([sq(0, 0, 8, 10)], "coastline"),
    }
    path = save_polygons(sets.values(), tmp_path / "polys.geojson")
    back = load_polygons(path)
    assert {k: len(v.polygons) for k, v in back.items()} == {k: len(v.polygons) for k, v in sets.items()}
    m1 = rock_mask_from_polygons(sets, (0, 10), 1.0, 10, 10)
    m2 = rock_mask_from_polygons(back, (0, 10), 1.0, 10, 10)
    assert np.array_equal(m1.mask, m2.mask)
    assert m1.mask.sum() == 80 - oracles.rect_union_area([(2, 2, 6, 8), (5, 3, 8, 7)])


def test_polygon_file_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_polygons(tmp_path / "none.geojson")
    p = tmp_path / "bad.geojson"
    p.write_text('{"type": "FeatureCollection", "features": [{"properties": {"tag": "river"}, '
                 '"geometry": {"type": "Point", "coordinates": [0, 0]}}]}')
    with pytest.raises(DataError, match="feature 0"):
        load_polygons(p)
