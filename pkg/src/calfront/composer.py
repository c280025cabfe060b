"""Model-input time series.

Two policies build a series around an anchor frame:

* ``consecutive``: L date-consecutive acquisitions containing the anchor,
  every output kept.
* ``summer_reference``: one reference acquisition per summer month of the
  anchor's year (closest to the 16th, earlier on ties) at the head of the
  series, followed by A consecutive non-reference acquisitions around the
  anchor. Only the analysis outputs are kept.

Anything with a ``date`` attribute can be composed; inputs are re-sorted by
``(date, name)`` so the result does not depend on input order.
"""
from __future__ import annotations

import calendar
import datetime as dt
from dataclasses import dataclass, field
from typing import Any, Sequence

from .errors import ValidationError

CONSECUTIVE = "consecutive"
SUMMER_REFERENCE = "summer_reference"
REFERENCE = "reference"
ANALYSIS = "analysis"
MIDPOINT_DAY = 16


@dataclass(frozen=True)
class SeriesPolicy:
    kind: str = CONSECUTIVE
    length: int = 8
    n_references: int = 0
    reference_months: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in (CONSECUTIVE, SUMMER_REFERENCE):
            raise ValidationError(f"unknown policy {self.kind!r}")
        if self.length < 2:
            raise ValidationError("series length must be >= 2")
        if self.kind == CONSECUTIVE and self.n_references:
            raise ValidationError("consecutive series have no references")
        if self.kind == SUMMER_REFERENCE:
            if not 0 < self.n_references < self.length:
                raise ValidationError("need 0 < references < length")
            if len(self.reference_months) != self.n_references:
                raise ValidationError("one reference month per reference required")
            if len(set(self.reference_months)) != len(self.reference_months):
                raise ValidationError("reference months must be distinct")
            if not all(1 <= m <= 12 for m in self.reference_months):
                raise ValidationError("reference months must lie in 1..12")

    @property
    def n_analysis(self) -> int:
        return self.length - self.n_references

    @classmethod
    def consecutive(cls, length: int = 8) -> "SeriesPolicy":
        return cls(CONSECUTIVE, length)

    @classmethod
    def summer_reference(cls, n_analysis: int = 4, months: Sequence[int] = (7, 8, 9)) -> "SeriesPolicy":
        return cls(SUMMER_REFERENCE, len(months) + n_analysis, len(months), tuple(months))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "length": self.length, "n_references": self.n_references,
                "reference_months": list(self.reference_months)}

    @classmethod
    def from_dict(cls, d: dict) -> "SeriesPolicy":
        return cls(d["kind"], int(d["length"]), int(d.get("n_references", 0)),
                   tuple(d.get("reference_months", ())))


@dataclass
class ComposedSeries:
    frames: list[Any]
    roles: list[str]
    retain: list[bool]
    anchor: int = 0  # position of the anchor frame inside ``frames``

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def analysis_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.retain) if r]

    def to_dict(self) -> dict:
        return {
            "frames": [getattr(f, "name", str(f)) for f in self.frames],
            "roles": self.roles, "retain": self.retain, "anchor": self.anchor,
        }


def _key(frame):
    return frame.date, getattr(frame, "name", "")


def _window(n: int, pos: int, size: int) -> int:
    """Start of a ``size`` window over ``n`` items that contains ``pos``, centred where possible."""
    return min(max(pos - size // 2, 0), n - size)


def compose_consecutive(frames: Sequence, anchor_index: int, policy: SeriesPolicy) -> ComposedSeries:
    if policy.kind != CONSECUTIVE:
        raise ValidationError(f"policy {policy.kind!r} passed to compose_consecutive")
    L = policy.length
    if len(frames) < L:
        raise ValidationError(f"need {L} frames for a consecutive series, have {len(frames)} "
                              f"(short by {L - len(frames)})")
    anchor = frames[anchor_index]
    ordered = sorted(frames, key=_key)
    pos = next(i for i, f in enumerate(ordered) if f is anchor)
    start = _window(len(ordered), pos, L)
    return ComposedSeries(ordered[start:start + L], [ANALYSIS] * L, [True] * L, pos - start)


def select_references(frames: Sequence, year: int, months: Sequence[int], exclude=()) -> list:
    refs = []
    for month in months:
        cands = [f for f in frames if f.date.year == year and f.date.month == month
                 and not any(f is e for e in exclude)]
        if not cands:
            raise ValidationError(f"missing reference month: {calendar.month_name[month]}")
        mid = dt.date(year, month, MIDPOINT_DAY)
        refs.append(min(cands, key=lambda f: (abs((f.date - mid).days), _key(f))))
    return refs


def compose_with_summer_refs(frames: Sequence, anchor_index: int, policy: SeriesPolicy,
                             avoid_anchor: bool = False) -> ComposedSeries:
    """Summer references at the head, analysis frames around the anchor after.

    If the anchor itself would be chosen as a reference a ValidationError is
    raised, unless ``avoid_anchor`` asks for the next-best reference instead.
    """
    if policy.kind != SUMMER_REFERENCE:
        raise ValidationError(f"policy {policy.kind!r} passed to compose_with_summer_refs")
    anchor = frames[anchor_index]
    ordered = sorted(frames, key=_key)
    year = anchor.date.year
    refs = select_references(ordered, year, policy.reference_months, (anchor,) if avoid_anchor else ())
    if any(r is anchor for r in refs):
        raise ValidationError(f"anchor {getattr(anchor, 'name', anchor.date)} was selected as a reference; re-anchor")
    rest = [f for f in ordered if not any(f is r for r in refs)]
    A = policy.n_analysis
    if len(rest) < A:
        raise ValidationError(f"need {A} analysis frames, have {len(rest)} (short by {A - len(rest)})")
    pos = next(i for i, f in enumerate(rest) if f is anchor)
    start = _window(len(rest), pos, A)
    analysis = rest[start:start + A]
    R = policy.n_references
    return ComposedSeries(
        refs + analysis,
        [REFERENCE] * R + [ANALYSIS] * A,
        [False] * R + [True] * A,
        R + pos - start,
    )


def compose(frames: Sequence, anchor_index: int, policy: SeriesPolicy, avoid_anchor: bool = False) -> ComposedSeries:
    if policy.kind == CONSECUTIVE:
        return compose_consecutive(frames, anchor_index, policy)
    return compose_with_summer_refs(frames, anchor_index, policy, avoid_anchor)
