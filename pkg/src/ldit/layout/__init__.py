from .generator import generate_layout
from .metrics import (
    DEFAULT_THRESHOLDS,
    LayoutThresholds,
    character_count_score,
    coverage_ratio,
    layout_metrics,
    layout_precision,
    page_order_ok,
    panel_count_score,
    panel_ordering_score,
    union_area,
    valid_character_score,
)
from .types import LayoutBox, PageLayout, PanelSpec, containment, layout_to_dict, parse_layout, serialize_layout

__all__ = [
    "DEFAULT_THRESHOLDS",
    "LayoutBox",
    "LayoutThresholds",
    "PageLayout",
    "PanelSpec",
    "character_count_score",
    "containment",
    "coverage_ratio",
    "generate_layout",
    "layout_metrics",
    "layout_precision",
    "layout_to_dict",
    "page_order_ok",
    "panel_count_score",
    "panel_ordering_score",
    "parse_layout",
    "serialize_layout",
    "union_area",
    "valid_character_score",
]
