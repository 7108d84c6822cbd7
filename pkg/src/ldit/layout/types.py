"""Comic page layout model and its JSON interchange format.

Schema::

    {"aspect_ratio": number,
     "panels": [{"box": [x0, y0, x1, y1],
                 "caption": string,
                 "characters": [{"id": string, "box": [x0, y0, x1, y1]}]}]}

Boxes are normalized page coordinates; arrays are in reading order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from ..errors import ParseError, ValidationError

MIN_CONTAINMENT = 0.9
_DIGITS = 9


@dataclass(frozen=True)
class LayoutBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise ValidationError(f"box coordinates must be finite numbers: {list(vals)}")
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValidationError(f"box {list(vals)} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def intersection(self, other: "LayoutBox") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0.0) * max(h, 0.0)

    def iou(self, other: "LayoutBox") -> float:
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


def containment(inner: LayoutBox, outer: LayoutBox) -> float:
    """Fraction of ``inner``'s area that lies inside ``outer``."""
    return inner.intersection(outer) / inner.area


@dataclass(frozen=True)
class PanelSpec:
    box: LayoutBox
    characters: tuple[tuple[str, LayoutBox], ...] = ()
    caption: str = ""

    def __post_init__(self):
        object.__setattr__(self, "characters", tuple((str(i), b) for i, b in self.characters))
        ids = [cid for cid, _ in self.characters]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate character ids in panel: {ids}")

    def check_containment(self, threshold: float = MIN_CONTAINMENT) -> None:
        for j, (cid, cbox) in enumerate(self.characters):
            if containment(cbox, self.box) < threshold:
                raise ValidationError(
                    f"character {cid!r} (index {j}) lies less than {threshold:.0%} inside its panel"
                )


@dataclass(frozen=True)
class PageLayout:
    panels: tuple[PanelSpec, ...]
    aspect_ratio: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "panels", tuple(self.panels))
        if not self.panels:
            raise ValidationError("a page needs at least one panel")
        if not (math.isfinite(self.aspect_ratio) and self.aspect_ratio > 0):
            raise ValidationError(f"aspect_ratio must be positive, got {self.aspect_ratio}")

    @property
    def character_counts(self) -> list[int]:
        return [len(p.characters) for p in self.panels]


# ---------------------------------------------------------------------------
# interchange
# ---------------------------------------------------------------------------


def _reject_constant(name):
    raise ParseError("", f"non-finite number {name} is not allowed")


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(path, f"expected a number, got {type(value).__name__}")
    return float(value)


def _keys(obj, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(path, f"expected an object, got {type(obj).__name__}")
    missing = sorted(allowed - obj.keys())
    extra = sorted(obj.keys() - allowed)
    if missing:
        raise ParseError(path, f"missing key(s) {missing}")
    if extra:
        raise ParseError(path, f"unknown key(s) {extra}")


def _box(value, path: str) -> LayoutBox:
    if not isinstance(value, list) or len(value) != 4:
        raise ParseError(path, "expected [x0, y0, x1, y1]")
    nums = [_number(v, f"{path}[{k}]") for k, v in enumerate(value)]
    try:
        return LayoutBox(*nums)
    except ValidationError as exc:
        raise ParseError(path, str(exc)) from None


def parse_layout(data: bytes | str, strict: bool = True) -> PageLayout:
    """Parse layout JSON.

    With ``strict`` (the default) each character box must lie at least 90%
    inside its panel; metric code parses with ``strict=False`` so imperfect
    layouts can still be scored.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("", f"not UTF-8: {exc}") from None
    try:
        raw = json.loads(data, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError("", f"invalid JSON: {exc}") from None

    _keys(raw, {"aspect_ratio", "panels"}, "$")
    aspect = _number(raw["aspect_ratio"], "aspect_ratio")
    if not aspect > 0:
        raise ParseError("aspect_ratio", "must be positive")
    if not isinstance(raw["panels"], list) or not raw["panels"]:
        raise ParseError("panels", "expected a non-empty array")

    panels = []
    for k, praw in enumerate(raw["panels"]):
        ppath = f"panels[{k}]"
        _keys(praw, {"box", "caption", "characters"}, ppath)
        pbox = _box(praw["box"], f"{ppath}.box")
        if not isinstance(praw["caption"], str):
            raise ParseError(f"{ppath}.caption", "expected a string")
        if not isinstance(praw["characters"], list):
            raise ParseError(f"{ppath}.characters", "expected an array")
        chars, seen = [], set()
        for j, craw in enumerate(praw["characters"]):
            cpath = f"{ppath}.characters[{j}]"
            _keys(craw, {"id", "box"}, cpath)
            cid = craw["id"]
            if not isinstance(cid, str):
                raise ParseError(f"{cpath}.id", "expected a string")
            if cid in seen:
                raise ParseError(f"{cpath}.id", f"duplicate character id {cid!r}")
            seen.add(cid)
            cbox = _box(craw["box"], f"{cpath}.box")
            if strict and containment(cbox, pbox) < MIN_CONTAINMENT:
                raise ParseError(
                    f"{cpath}.box", f"less than {MIN_CONTAINMENT:.0%} inside panel {ppath}.box"
                )
            chars.append((cid, cbox))
        panels.append(PanelSpec(pbox, tuple(chars), praw["caption"]))
    return PageLayout(tuple(panels), aspect)


def _fmt(x: float) -> float:
    return float(f"{x:.{_DIGITS}g}")


def layout_to_dict(page: PageLayout) -> dict:
    return {
        "aspect_ratio": _fmt(page.aspect_ratio),
        "panels": [
            {
                "box": [_fmt(v) for v in p.box.as_list()],
                "caption": p.caption,
                "characters": [
                    {"id": cid, "box": [_fmt(v) for v in cbox.as_list()]} for cid, cbox in p.characters
                ],
            }
            for p in page.panels
        ],
    }


def serialize_layout(page: PageLayout) -> bytes:
    text = json.dumps(layout_to_dict(page), indent=2, ensure_ascii=False, allow_nan=False)
    return (text + "\n").encode("utf-8")
