"""Deterministic row-banded page layout generator.

Panels are tiled in horizontal bands. Band heights are proportional to the
number of panels they hold, so panel areas stay balanced. Internal edges get
seeded jitter of at most ``jitter`` page units, every cell is inset by half
the gutter, and panels are emitted top-to-bottom and, within a band, in the
configured reading direction. Characters stand side by side along the panel
bottom.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import CapacityError
from .types import LayoutBox, PageLayout, PanelSpec

MAX_PANELS = 12
MAX_CHARACTERS = 4
CHAR_HEIGHT_SHARE = 0.8
CHAR_SIDE_INSET = 0.05


def _band_counts(n: int, aspect_ratio: float, rng: np.random.Generator) -> list[int]:
    rows = int(np.clip(round(np.sqrt(n / aspect_ratio)), 1, n))
    base, extra = divmod(n, rows)
    counts = [base] * rows
    for r in sorted(rng.choice(rows, size=extra, replace=False)):
        counts[int(r)] += 1
    return counts


def _jittered_edges(weights: Sequence[float], jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Cumulative edges on [0, 1]; internal edges move by at most ``jitter``."""
    w = np.asarray(weights, dtype=float)
    edges = np.concatenate([[0.0], np.cumsum(w / w.sum())])
    edges[-1] = 1.0
    for k in range(1, len(edges) - 1):
        # keep each neighbour at least half its nominal size
        lo_room = (edges[k] - edges[k - 1]) / 2.0
        hi_room = (edges[k + 1] - edges[k]) / 2.0
        shift = rng.uniform(-jitter, jitter)
        edges[k] += float(np.clip(shift, -lo_room, hi_room))
    return edges


def _characters(panel: LayoutBox, count: int, right_to_left: bool) -> tuple[tuple[str, LayoutBox], ...]:
    if count == 0:
        return ()
    slot = panel.width / count
    top = panel.y1 - CHAR_HEIGHT_SHARE * panel.height
    boxes = [
        LayoutBox(
            panel.x0 + (s + CHAR_SIDE_INSET) * slot,
            top,
            panel.x0 + (s + 1 - CHAR_SIDE_INSET) * slot,
            panel.y1,
        )
        for s in range(count)
    ]
    if right_to_left:
        boxes.reverse()
    return tuple((f"char{j + 1}", b) for j, b in enumerate(boxes))


def generate_layout(
    script: Sequence[int],
    aspect_ratio: float = 0.7,
    seed: int = 0,
    right_to_left: bool = True,
    gutter: float = 0.02,
    jitter: float = 0.05,
    captions: Sequence[str] | None = None,
) -> PageLayout:
    """Build a page for ``script``, a list of per-panel character counts."""
    n = len(script)
    if not 1 <= n <= MAX_PANELS:
        raise CapacityError(f"panel count must be in [1, {MAX_PANELS}], got {n}")
    for k, c in enumerate(script):
        if not 0 <= int(c) <= MAX_CHARACTERS:
            raise CapacityError(f"panel {k}: character count must be in [0, {MAX_CHARACTERS}], got {c}")
    if not aspect_ratio > 0:
        raise CapacityError(f"aspect_ratio must be positive, got {aspect_ratio}")
    if captions is not None and len(captions) != n:
        raise CapacityError(f"{len(captions)} captions for {n} panels")

    rng = np.random.default_rng(seed)
    counts = _band_counts(n, aspect_ratio, rng)
    row_edges = _jittered_edges(counts, jitter, rng)
    half = gutter / 2.0

    panels = []
    k = 0
    for r, per_row in enumerate(counts):
        col_edges = _jittered_edges([1.0] * per_row, jitter, rng)
        y0, y1 = row_edges[r] + half, row_edges[r + 1] - half
        order = range(per_row - 1, -1, -1) if right_to_left else range(per_row)
        for c in order:
            box = LayoutBox(float(col_edges[c] + half), float(y0), float(col_edges[c + 1] - half), float(y1))
            caption = captions[k] if captions is not None else ""
            panels.append(PanelSpec(box, _characters(box, int(script[k]), right_to_left), caption))
            k += 1
    return PageLayout(tuple(panels), float(aspect_ratio))
