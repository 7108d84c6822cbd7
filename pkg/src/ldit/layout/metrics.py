"""Page validity metrics and layout precision.

All scores are percentages. Thresholds live in ``LayoutThresholds`` so the
CLI can override them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import ValidationError
from .types import LayoutBox, PageLayout, containment


@dataclass(frozen=True)
class LayoutThresholds:
    min_containment: float = 0.9
    min_area_ratio: float = 0.03
    max_area_ratio: float = 0.95
    row_overlap: float = 0.5
    right_to_left: bool = True


DEFAULT_THRESHOLDS = LayoutThresholds()


def union_area(boxes: Iterable[LayoutBox]) -> float:
    """Exact area of a union of axis-aligned boxes by coordinate compression."""
    boxes = list(boxes)
    if not boxes:
        return 0.0
    xs = sorted({v for b in boxes for v in (b.x0, b.x1)})
    ys = sorted({v for b in boxes for v in (b.y0, b.y1)})
    xi = {v: k for k, v in enumerate(xs)}
    yi = {v: k for k, v in enumerate(ys)}
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for b in boxes:
        covered[yi[b.y0] : yi[b.y1], xi[b.x0] : xi[b.x1]] = True
    dx = np.diff(xs)
    dy = np.diff(ys)
    return float((covered * np.outer(dy, dx)).sum())


def coverage_ratio(page: PageLayout) -> float:
    return min(union_area(p.box for p in page.panels), 1.0)


def _vertical_overlap(a: LayoutBox, b: LayoutBox) -> float:
    inter = min(a.y1, b.y1) - max(a.y0, b.y0)
    return max(inter, 0.0) / min(a.height, b.height)


def reading_rows(page: PageLayout, overlap: float = 0.5) -> list[list[LayoutBox]]:
    """Group consecutive panels whose vertical overlap reaches ``overlap``."""
    rows: list[list[LayoutBox]] = []
    for panel in page.panels:
        if rows and _vertical_overlap(rows[-1][-1], panel.box) >= overlap:
            rows[-1].append(panel.box)
        else:
            rows.append([panel.box])
    return rows


def page_order_ok(page: PageLayout, thresholds: LayoutThresholds = DEFAULT_THRESHOLDS) -> bool:
    rows = reading_rows(page, thresholds.row_overlap)
    tops = [min(b.y0 for b in row) for row in rows]
    if any(b < a for a, b in zip(tops, tops[1:])):
        return False
    for row in rows:
        xs = [b.center[0] for b in row]
        if thresholds.right_to_left:
            if any(b >= a for a, b in zip(xs, xs[1:])):
                return False
        elif any(b <= a for a, b in zip(xs, xs[1:])):
            return False
    return True


def _pct(hits: int, total: int) -> float:
    return 100.0 * hits / total if total else 100.0


def panel_ordering_score(pages: Sequence[PageLayout], thresholds: LayoutThresholds = DEFAULT_THRESHOLDS) -> float:
    return _pct(sum(page_order_ok(p, thresholds) for p in pages), len(pages))


def panel_count_score(pages: Sequence[PageLayout], expected_counts: Sequence[int]) -> float:
    if len(pages) != len(expected_counts):
        raise ValidationError(f"{len(pages)} pages but {len(expected_counts)} expected counts")
    return _pct(sum(len(p.panels) == int(n) for p, n in zip(pages, expected_counts)), len(pages))


def character_count_score(pages: Sequence[PageLayout], expected_per_panel: Sequence[Sequence[int]]) -> float:
    """Per-panel exact matches; a missing panel counts as a miss."""
    if len(pages) != len(expected_per_panel):
        raise ValidationError(f"{len(pages)} pages but {len(expected_per_panel)} expectations")
    hits = total = 0
    for page, expected in zip(pages, expected_per_panel):
        got = page.character_counts
        for k, n in enumerate(expected):
            total += 1
            hits += k < len(got) and got[k] == int(n)
    return _pct(hits, total)


def character_valid(cbox: LayoutBox, pbox: LayoutBox, thresholds: LayoutThresholds = DEFAULT_THRESHOLDS) -> bool:
    ratio = cbox.area / pbox.area
    return (
        containment(cbox, pbox) >= thresholds.min_containment
        and thresholds.min_area_ratio <= ratio <= thresholds.max_area_ratio
    )


def valid_character_score(pages: Sequence[PageLayout], thresholds: LayoutThresholds = DEFAULT_THRESHOLDS) -> float:
    flags = [
        character_valid(cbox, panel.box, thresholds)
        for page in pages
        for panel in page.panels
        for _, cbox in panel.characters
    ]
    return _pct(sum(flags), len(flags))


def layout_metrics(
    pages: Sequence[PageLayout],
    expected_counts: Sequence[int] | None = None,
    expected_per_panel: Sequence[Sequence[int]] | None = None,
    thresholds: LayoutThresholds = DEFAULT_THRESHOLDS,
) -> dict[str, float]:
    """The five page-level scores; expectations default to the pages' own counts."""
    if expected_counts is None:
        expected_counts = [len(p.panels) for p in pages]
    if expected_per_panel is None:
        expected_per_panel = [p.character_counts for p in pages]
    return {
        "panel_count": panel_count_score(pages, expected_counts),
        "coverage_ratio": 100.0 * float(np.mean([coverage_ratio(p) for p in pages])),
        "panel_ordering": panel_ordering_score(pages, thresholds),
        "valid_characters": valid_character_score(pages, thresholds),
        "character_count": character_count_score(pages, expected_per_panel),
    }


def layout_precision(
    detections: Sequence[tuple[object, LayoutBox]],
    targets: Sequence[tuple[object, LayoutBox]],
    iou_threshold: float = 0.5,
) -> float:
    """Percent of targets with a same-id detection at IoU >= ``iou_threshold``."""
    for name, items in (("detection", detections), ("target", targets)):
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"{name} ids must be unique, got {ids}")
    found = dict(detections)
    hits = sum(
        1 for sid, box in targets if sid in found and found[sid].iou(box) >= iou_threshold
    )
    return _pct(hits, len(targets))


def iou(a: LayoutBox, b: LayoutBox) -> float:
    return a.iou(b)


__all__ = [
    "LayoutThresholds",
    "DEFAULT_THRESHOLDS",
    "union_area",
    "coverage_ratio",
    "reading_rows",
    "page_order_ok",
    "panel_ordering_score",
    "panel_count_score",
    "character_count_score",
    "character_valid",
    "valid_character_score",
    "layout_metrics",
    "layout_precision",
    "iou",
]
