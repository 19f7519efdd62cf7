"""Exact rational helpers shared across the pipeline.

All lengths, times and offsets in the combinatorial stages are
`fractions.Fraction` values; floats appear only in the numeric linear
algebra (intertwiners, oracle).
"""
from __future__ import annotations

from fractions import Fraction
from typing import Iterable


def parse_ratio(text: str) -> Fraction:
    """Parse `p/q` or an integer literal into a Fraction."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return Fraction(int(num), int(den))
    return Fraction(int(text))


def fmt_ratio(value) -> str:
    """Canonical `p/q` (or `p` for integers) rendering."""
    q = Fraction(value)
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


def merge_intervals(intervals: Iterable[tuple[Fraction, Fraction]]):
    """Union of closed intervals as a sorted list of disjoint closed intervals.

    Touching intervals ([a,b],[b,c]) are merged.  Empty input gives [].
    """
    items = sorted((lo, hi) for lo, hi in intervals if hi >= lo)
    merged: list[tuple[Fraction, Fraction]] = []
    for lo, hi in items:
        if merged and lo <= merged[-1][1]:
            if hi > merged[-1][1]:
                merged[-1] = (merged[-1][0], hi)
        else:
            merged.append((lo, hi))
    return merged


def endpoint_only_overlaps(ranges: Iterable[tuple[Fraction, Fraction]]) -> bool:
    """True iff the closed ranges pairwise intersect in at most endpoints."""
    items = sorted(ranges)
    for (lo1, hi1), (lo2, hi2) in zip(items, items[1:]):
        if lo2 < hi1:
            return False
    return True
