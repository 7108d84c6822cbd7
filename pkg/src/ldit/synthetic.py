"""Procedural paired scenes and the color-blob detection oracle.

A scene places ``n`` colored glyphs at non-overlapping boxes on a flat
canvas. References are the un-jittered glyphs rendered at their box size;
the target applies per-subject scale/rotation/hue jitter whose magnitude
grows with the target temporal index (``t_target / 9``, capped at 1).
Subject identity is carried by a palette color, which makes detection an
exact connected-component problem.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ValidationError
from .layout import LayoutBox, PageLayout, PanelSpec, serialize_layout
from .ppm import write_ppm
from .rope import RegionBox

PALETTE: dict[int, tuple[int, int, int]] = {
    0: (220, 40, 40),
    1: (40, 180, 40),
    2: (40, 60, 220),
    3: (230, 210, 30),
    4: (200, 40, 200),
    5: (30, 200, 210),
    6: (240, 130, 20),
    7: (20, 20, 20),
}
BACKGROUND = (128, 128, 128)
SHAPES = ("disk", "square", "triangle", "ring")

PLACEMENT_ATTEMPTS = 1000
JITTER_FULL_AT = 9
SCALE_RANGE = 0.2
ROTATION_RANGE = 30.0
HUE_RANGE = 15.0
TEXTURE_AMPLITUDE = 10.0
DETECT_TOLERANCE = 40
DETECT_MIN_PIXELS = 16


@dataclass(frozen=True)
class Subject:
    id: int
    shape: str
    color: tuple[int, int, int]
    texture_phase: float


@dataclass(frozen=True)
class Jitter:
    scale: float = 1.0
    rotation: float = 0.0
    hue: float = 0.0

    @property
    def magnitude(self) -> float:
        """Mean of the three components, each normalized to its full range."""
        return (
            abs(self.scale - 1.0) / SCALE_RANGE
            + abs(self.rotation) / ROTATION_RANGE
            + abs(self.hue) / HUE_RANGE
        ) / 3.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    subjects: tuple[Subject, ...]
    pixel_boxes: tuple[tuple[int, int, int, int], ...]
    jitter: tuple[Jitter, ...]
    canvas: tuple[int, int] = (32, 32)
    background: tuple[int, int, int] = BACKGROUND
    t_target: int = 3

    @property
    def placement(self) -> list[LayoutBox]:
        h, w = self.canvas
        return [LayoutBox(x0 / w, y0 / h, x1 / w, y1 / h) for x0, y0, x1, y1 in self.pixel_boxes]

    @property
    def palette(self) -> dict[int, tuple[int, int, int]]:
        return {s.id: s.color for s in self.subjects}


@dataclass
class PairedSample:
    references: list[np.ndarray]
    target: np.ndarray
    layout: list[LayoutBox]
    condition_ids: list[int]
    spec: SceneSpec = field(repr=False)

    @property
    def n_subjects(self) -> int:
        return len(self.references)

    def region_boxes(self, patch_size: int, align: float = 0.5) -> list[RegionBox]:
        """Placement boxes in latent-grid units."""
        p = float(patch_size)
        return [RegionBox(x0 / p, y0 / p, x1 / p, y1 / p, align) for x0, y0, x1, y1 in self.spec.pixel_boxes]

    def targets(self) -> list[tuple[int, LayoutBox]]:
        return list(zip(self.condition_ids, self.layout))

    def page(self) -> PageLayout:
        h, w = self.spec.canvas
        chars = tuple((str(i), b) for i, b in zip(self.condition_ids, self.layout))
        return PageLayout((PanelSpec(LayoutBox(0.0, 0.0, 1.0, 1.0), chars, ""),), w / h)


def jitter_strength(t_target: int) -> float:
    return min(max(t_target, 0) / JITTER_FULL_AT, 1.0)


def box_sizes(canvas: tuple[int, int], patch_size: int) -> list[int]:
    """Allowed box side lengths: multiples of the patch in [min/4, min/2]."""
    side = min(canvas)
    lo = max(patch_size, math.ceil(side / 4 / patch_size) * patch_size)
    return list(range(lo, side // 2 + 1, patch_size))


def derive_seed(master: int, index: int, split: str = "train") -> int:
    """Scene seed for item ``index``; train seeds < 2**31 <= eval seeds."""
    tag = {"train": 0, "eval": 1}[split]
    raw = int(np.random.SeedSequence([int(master), int(index), tag]).generate_state(1)[0]) & 0x7FFFFFFF
    return raw | (tag << 31)


def _shift_hue(color: tuple[int, int, int], degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return np.asarray(color, dtype=float)
    h, l, s = colorsys.rgb_to_hls(*(c / 255.0 for c in color))
    r, g, b = colorsys.hls_to_rgb((h + degrees / 360.0) % 1.0, l, s)
    return np.array([r, g, b]) * 255.0


def _glyph_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if shape == "triangle":
        return (np.abs(v) <= 1.0) & (np.abs(u) <= 0.2 + 0.4 * (v + 1.0))
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.25)
    raise ValidationError(f"unknown shape {shape!r}")


def render_glyph(
    subject: Subject,
    size: tuple[int, int],
    jitter: Jitter = Jitter(),
    background: tuple[int, int, int] = BACKGROUND,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rgb, mask)`` of a glyph filling an ``h x w`` box."""
    h, w = size
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    v, u = np.meshgrid(ys, xs, indexing="ij")
    theta = math.radians(jitter.rotation)
    c, s = math.cos(theta), math.sin(theta)
    ur = (c * u + s * v) / jitter.scale
    vr = (-s * u + c * v) / jitter.scale
    mask = _glyph_mask(subject.shape, ur, vr)
    base = _shift_hue(subject.color, jitter.hue)
    shade = TEXTURE_AMPLITUDE * np.sin(2.0 * math.pi * (0.75 * ur + subject.texture_phase))
    rgb = np.clip(np.round(base[None, None, :] + shade[..., None]), 0, 255)
    out = np.where(mask[..., None], rgb, np.asarray(background, dtype=float))
    return out.astype(np.uint8), mask


def _place_boxes(rng, sizes, canvas) -> list[tuple[int, int, int, int]]:
    """Disjoint boxes (pairwise IoU 0), so no glyph occludes another.

    Largest boxes go first; each is drawn uniformly from the positions that
    stay clear of those already placed.
    """
    hc, wc = canvas
    order = sorted(range(len(sizes)), key=lambda k: -sizes[k][0] * sizes[k][1])
    for _ in range(PLACEMENT_ATTEMPTS):
        taken = np.zeros((hc, wc), dtype=bool)
        boxes: dict[int, tuple[int, int, int, int]] = {}
        for k in order:
            bh, bw = sizes[k]
            if bh > hc or bw > wc:
                break
            # summed-area table gives the occupied count under every window
            sat = np.pad(taken.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
            under = sat[bh:, bw:] - sat[:-bh, bw:] - sat[bh:, :-bw] + sat[:-bh, :-bw]
            free = np.argwhere(under == 0)
            if len(free) == 0:
                break
            y0, x0 = (int(v) for v in free[rng.integers(len(free))])
            boxes[k] = (x0, y0, x0 + bw, y0 + bh)
            taken[y0 : y0 + bh, x0 : x0 + bw] = True
        else:
            return [boxes[k] for k in range(len(sizes))]
    raise GenerationError(f"could not place {len(sizes)} disjoint boxes on {canvas}")


def gen_scene(
    seed: int,
    n_subjects: int,
    canvas: tuple[int, int] = (32, 32),
    t_target: int = 3,
    sizes: Sequence[tuple[int, int]] | None = None,
    patch_size: int = 4,
) -> PairedSample:
    """Deterministic paired sample for ``seed``.

    ``sizes`` fixes the per-subject box sizes in pixels (used to bucket
    training batches by sequence structure).
    """
    if not 1 <= n_subjects <= 4:
        raise ValidationError(f"n_subjects must be in [1, 4], got {n_subjects}")
    if min(canvas) < 32:
        raise ValidationError(f"canvas must be at least 32x32, got {canvas}")
    allowed = box_sizes(canvas, patch_size)
    rng = np.random.default_rng(seed)
    ids = [int(i) for i in rng.choice(len(PALETTE), size=n_subjects, replace=False)]
    shapes = [SHAPES[int(k)] for k in rng.integers(0, len(SHAPES), size=n_subjects)]
    phases = rng.uniform(0.0, 1.0, size=n_subjects)
    drawn = [(int(a), int(b)) for a, b in rng.choice(allowed, size=(n_subjects, 2))]
    if sizes is None:
        sizes = drawn
    else:
        sizes = [tuple(map(int, s)) for s in sizes]
        if len(sizes) != n_subjects or any(h % patch_size or w % patch_size for h, w in sizes):
            raise ValidationError(f"sizes {sizes} must give {n_subjects} patch-aligned boxes")
    unit = rng.uniform(-1.0, 1.0, size=(n_subjects, 3))
    boxes = _place_boxes(rng, sizes, canvas)

    m = jitter_strength(t_target)
    subjects = tuple(Subject(i, sh, PALETTE[i], float(ph)) for i, sh, ph in zip(ids, shapes, phases))
    jitters = tuple(
        Jitter(1.0 + SCALE_RANGE * m * a, ROTATION_RANGE * m * b, HUE_RANGE * m * c) for a, b, c in unit
    )
    spec = SceneSpec(int(seed), subjects, tuple(boxes), jitters, tuple(canvas), BACKGROUND, int(t_target))

    target = np.empty(canvas + (3,), dtype=np.uint8)
    target[...] = BACKGROUND
    references = []
    for subj, jit, (x0, y0, x1, y1) in zip(subjects, jitters, boxes):
        ref, _ = render_glyph(subj, (y1 - y0, x1 - x0))
        references.append(ref)
        glyph, mask = render_glyph(subj, (y1 - y0, x1 - x0), jit)
        region = target[y0:y1, x0:x1]
        region[mask] = glyph[mask]
    return PairedSample(references, target, spec.placement, ids, spec)


def copy_compositor(sample: PairedSample) -> np.ndarray:
    """Paste each reference into its box; an oracle 'generator' for self-tests."""
    canvas = np.empty(sample.spec.canvas + (3,), dtype=np.uint8)
    canvas[...] = sample.spec.background
    for ref, (x0, y0, x1, y1) in zip(sample.references, sample.spec.pixel_boxes):
        canvas[y0:y1, x0:x1] = ref
    return canvas


def detect_subjects(
    image: np.ndarray,
    palette: dict[int, tuple[int, int, int]],
    tolerance: int = DETECT_TOLERANCE,
    min_pixels: int = DETECT_MIN_PIXELS,
) -> list[tuple[int, LayoutBox]]:
    """Tight box of the largest 4-connected blob per palette color."""
    img = np.asarray(image, dtype=int)
    h, w = img.shape[:2]
    found = []
    for sid, color in palette.items():
        hit = (np.abs(img - np.asarray(color, dtype=int)) <= tolerance).all(axis=-1)
        labels, count = ndimage.label(hit)
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        best = int(np.argmax(sizes)) + 1
        if sizes[best - 1] < min_pixels:
            continue
        rows, cols = np.nonzero(labels == best)
        found.append((sid, LayoutBox(cols.min() / w, rows.min() / h, (cols.max() + 1) / w, (rows.max() + 1) / h)))
    return found


def count_match_score(detected_counts: Sequence[int], expected_counts: Sequence[int]) -> float:
    if len(detected_counts) != len(expected_counts):
        raise ValidationError(f"{len(detected_counts)} detections vs {len(expected_counts)} expectations")
    if not expected_counts:
        return 100.0
    vals = [math.exp(-abs(d - e) / max(e, 1)) for d, e in zip(detected_counts, expected_counts)]
    return 100.0 * float(np.mean(vals))


def mean_jitter(samples: Sequence[PairedSample]) -> float:
    return float(np.mean([j.magnitude for s in samples for j in s.spec.jitter]))


def write_dataset(
    root: str | Path,
    split: str,
    seeds: Sequence[int],
    n_subjects: int,
    canvas: tuple[int, int] = (32, 32),
    t_target: int = 3,
) -> Path:
    """Write ``root/{split}/{seed}/`` folders plus ``root/{split}/manifest.jsonl``."""
    base = Path(root) / split
    base.mkdir(parents=True, exist_ok=True)
    lines = []
    for seed in seeds:
        sample = gen_scene(seed, n_subjects, canvas, t_target)
        folder = base / str(seed)
        folder.mkdir(exist_ok=True)
        refs = []
        for k, ref in enumerate(sample.references):
            write_ppm(folder / f"ref_{k}.ppm", ref)
            refs.append(f"{seed}/ref_{k}.ppm")
        write_ppm(folder / "target.ppm", sample.target)
        (folder / "layout.json").write_bytes(serialize_layout(sample.page()))
        record = {
            "seed": int(seed),
            "split": split,
            "n_subjects": n_subjects,
            "t_target": t_target,
            "condition_ids": sample.condition_ids,
            "shapes": [s.shape for s in sample.spec.subjects],
            "pixel_boxes": [list(b) for b in sample.spec.pixel_boxes],
            "references": refs,
            "target": f"{seed}/target.ppm",
            "layout": f"{seed}/layout.json",
        }
        lines.append(json.dumps(record, sort_keys=True))
    manifest = base / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
