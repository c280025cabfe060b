import datetime as dt
import random
import time

import pytest
from hypothesis import given, strategies as st

from calfront.composer import (
    ANALYSIS, REFERENCE, SeriesPolicy, compose, compose_consecutive, compose_with_summer_refs,
)
from calfront.errors import ValidationError
from conftest import Dated

D = dt.date


def days(year, *md):
    return [Dated(D(year, m, d)) for m, d in md]


# --- policy ----------------------------------------------------------------------

def test_policy_defaults():
    p = SeriesPolicy.summer_reference()
    assert (p.length, p.n_references, p.n_analysis, p.reference_months) == (7, 3, 4, (7, 8, 9))
    assert SeriesPolicy.consecutive().length == 8
    assert SeriesPolicy.from_dict(p.to_dict()) == p


@pytest.mark.parametrize("kw", [
    dict(kind="weekly"),
    dict(length=1),
    dict(kind="summer_reference", length=3, n_references=3, reference_months=(7, 8, 9)),
    dict(kind="summer_reference", length=7, n_references=3, reference_months=(7, 7, 9)),
    dict(kind="summer_reference", length=7, n_references=3, reference_months=(7, 8)),
])
def test_policy_invalid(kw):
    with pytest.raises(ValidationError):
        SeriesPolicy(**kw)


# --- consecutive -----------------------------------------------------------------

def test_consecutive_examples():
    fr = [Dated(D(2016, 1, 1) + dt.timedelta(days=6 * i)) for i in range(20)]
    s = compose_consecutive(fr[:8], 0, SeriesPolicy.consecutive())
    assert s.frames == fr[:8] and all(s.retain) and set(s.roles) == {ANALYSIS}
    s = compose_consecutive(fr, 10, SeriesPolicy.consecutive(8))
    i0 = fr.index(s.frames[0])
    assert s.frames == fr[i0:i0 + 8] and fr[10] in s.frames and s.frames[s.anchor] is fr[10]
    with pytest.raises(ValidationError, match="short by 3"):
        compose_consecutive(fr[:5], 0, SeriesPolicy.consecutive(8))


@given(st.lists(st.dates(D(2015, 1, 1), D(2018, 12, 31)), min_size=2, max_size=30, unique=True),
       st.integers(2, 10), st.data())
def test_consecutive_is_contiguous_slice(dates, L, data):
    fr = [Dated(d) for d in dates]
    if len(fr) < L:
        with pytest.raises(ValidationError):
            compose_consecutive(fr, 0, SeriesPolicy.consecutive(L))
        return
    a = data.draw(st.integers(0, len(fr) - 1))
    s = compose_consecutive(fr, a, SeriesPolicy.consecutive(L))
    ordered = sorted(fr, key=lambda f: f.date)
    i0 = ordered.index(s.frames[0])
    assert s.frames == ordered[i0:i0 + L]
    assert s.frames[s.anchor] is fr[a]


# --- summer references -------------------------------------------------------------

def winter(year):
    return days(year, (1, 5), (1, 17), (1, 29), (2, 10), (2, 22), (3, 6))


def test_summer_reference_example():
    summer = days(2017, (7, 2), (7, 20), (8, 14), (9, 9))
    frames = summer + winter(2017)
    anchor = frames.index(next(f for f in frames if f.date == D(2017, 2, 10)))
    s = compose_with_summer_refs(frames, anchor, SeriesPolicy.summer_reference())
    assert [f.date for f in s.frames[:3]] == [D(2017, 7, 20), D(2017, 8, 14), D(2017, 9, 9)]
    assert s.roles == [REFERENCE] * 3 + [ANALYSIS] * 4
    assert s.retain == [False] * 3 + [True] * 4
    analysis = [f.date for f in s.frames[3:]]
    assert analysis == sorted(analysis) and D(2017, 2, 10) in analysis
    assert s.frames[s.anchor].date == D(2017, 2, 10)
    assert all(d.month <= 3 for d in analysis)


def test_summer_reference_forced_choice():
    frames = days(2017, (7, 31), (8, 1), (9, 30)) + winter(2017)
    s = compose_with_summer_refs(frames, 5, SeriesPolicy.summer_reference())
    assert [f.date for f in s.frames[:3]] == [D(2017, 7, 31), D(2017, 8, 1), D(2017, 9, 30)]


def test_summer_reference_midpoint_tie_goes_earlier():
    frames = days(2017, (7, 13), (7, 19), (8, 16), (9, 16)) + winter(2017)
    s = compose_with_summer_refs(frames, 6, SeriesPolicy.summer_reference())
    assert s.frames[0].date == D(2017, 7, 13)


def test_summer_reference_missing_month():
    frames = days(2017, (7, 2), (8, 14)) + winter(2017)
    with pytest.raises(ValidationError, match="missing reference month: September"):
        compose_with_summer_refs(frames, 3, SeriesPolicy.summer_reference())


def test_summer_reference_anchor_conflict():
    frames = days(2017, (7, 16), (8, 14), (9, 9), (10, 1)) + winter(2017)
    with pytest.raises(ValidationError, match="re-anchor"):
        compose_with_summer_refs(frames, 0, SeriesPolicy.summer_reference())
    frames.append(Dated(D(2017, 7, 20)))
    s = compose(frames, 0, SeriesPolicy.summer_reference(), avoid_anchor=True)
    assert s.frames[0].date == D(2017, 7, 20) and s.frames[s.anchor] is frames[0]


def random_calendar(rng: random.Random):
    year = rng.randint(2014, 2022)
    frames = []
    for m in (7, 8, 9):
        for day in rng.sample(range(1, 29), rng.randint(1, 4)):
            frames.append(Dated(D(year, m, day)))
    start = D(year, 1, 1)
    for off in rng.sample(range(0, 180), rng.randint(4, 25)):
        frames.append(Dated(start + dt.timedelta(days=off)))
    if rng.random() < 0.3:  # other years' summers must never be chosen
        frames += [Dated(D(year - 1, m, rng.randint(1, 28))) for m in (7, 8, 9)]
    uniq = {f.date: f for f in frames}
    return year, list(uniq.values())


def test_summer_reference_calendar_properties():
    rng = random.Random(7)
    policy = SeriesPolicy.summer_reference()
    t0 = time.perf_counter()
    n_checked = 0
    for _ in range(1000):
        year, frames = random_calendar(rng)
        cands = [i for i, f in enumerate(frames) if f.date.year == year and f.date.month < 7]
        a = rng.choice(cands)
        s = compose(frames, a, policy)
        refs = s.frames[:3]
        assert len(s) == policy.n_references + policy.n_analysis
        assert [(f.date.year, f.date.month) for f in refs] == [(year, 7), (year, 8), (year, 9)]
        assert len({id(f) for f in s.frames}) == len(s)
        assert s.frames[s.anchor] is frames[a]
        assert s.retain == [r == ANALYSIS for r in s.roles]
        analysis = [f.date for f in s.frames[3:]]
        assert analysis == sorted(analysis)
        # midpoint rule against a direct scan
        for f, m in zip(refs, (7, 8, 9)):
            month = [g.date for g in frames if g.date.year == year and g.date.month == m]
            best = min(month, key=lambda d: (abs(d.day - 16), d))
            assert f.date == best
        shuffled = list(frames)
        rng.shuffle(shuffled)
        again = compose(shuffled, shuffled.index(frames[a]), policy)
        assert [f.date for f in again.frames] == [f.date for f in s.frames]
        assert again.anchor == s.anchor
        n_checked += 1
    assert n_checked == 1000
    assert time.perf_counter() - t0 < 30


def test_policy_mismatch():
    fr = winter(2017) + days(2017, (7, 1), (8, 1), (9, 1))
    with pytest.raises(ValidationError):
        compose_consecutive(fr, 0, SeriesPolicy.summer_reference())
    with pytest.raises(ValidationError):
        compose_with_summer_refs(fr, 0, SeriesPolicy.consecutive())
