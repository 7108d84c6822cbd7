import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldit.errors import CapacityError, ParseError, ValidationError
from ldit.layout import (
    LayoutBox,
    LayoutThresholds,
    PageLayout,
    PanelSpec,
    character_count_score,
    coverage_ratio,
    generate_layout,
    layout_metrics,
    layout_precision,
    panel_count_score,
    panel_ordering_score,
    parse_layout,
    serialize_layout,
    union_area,
    valid_character_score,
)

GOLDEN = Path(__file__).parent / "data" / "golden_layout.json"


def page_of(*boxes, chars=()):
    panels = [PanelSpec(LayoutBox(*b)) for b in boxes]
    if chars:
        panels[0] = PanelSpec(panels[0].box, tuple(chars))
    return PageLayout(tuple(panels))


def raster_union(boxes, n=1000):
    grid = np.zeros((n, n), dtype=bool)
    centers = (np.arange(n) + 0.5) / n
    for b in boxes:
        cols = (centers >= b.x0) & (centers < b.x1)
        rows = (centers >= b.y0) & (centers < b.y1)
        grid |= rows[:, None] & cols[None, :]
    return grid.mean()


def random_boxes(rng, k):
    out = []
    for _ in range(k):
        x0, y0 = rng.uniform(0, 0.9, size=2)
        out.append(LayoutBox(x0, y0, rng.uniform(x0 + 0.01, 1), rng.uniform(y0 + 0.01, 1)))
    return out


# -- data model and format --------------------------------------------------------


def test_box_invariants():
    with pytest.raises(ValidationError):
        LayoutBox(0.5, 0, 0.5, 1)
    with pytest.raises(ValidationError):
        LayoutBox(0, 0, 1.2, 1)
    assert LayoutBox(0, 0, 0.5, 0.5).iou(LayoutBox(0.25, 0, 0.75, 0.5)) == pytest.approx(1 / 3)


def test_golden_round_trip():
    raw = GOLDEN.read_bytes()
    page = parse_layout(raw)
    assert serialize_layout(page) == raw
    assert [c for c, _ in page.panels[0].characters] == ["fox", "crow"]


def test_minimal_page_parses():
    page = parse_layout('{"aspect_ratio": 1, "panels": [{"box": [0,0,1,1], "caption": "", "characters": []}]}')
    assert len(page.panels) == 1 and coverage_ratio(page) == 1.0


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["panels"][1].__setitem__("box", [0.9, 0.5, 0.1, 0.9]), "panels[1].box"),
        (lambda d: d["panels"][0]["characters"][1].__setitem__("id", "fox"), "panels[0].characters"),
        (lambda d: d.__setitem__("extra", 1), "extra"),
        (lambda d: d["panels"][0].pop("caption"), "panels[0]: missing key(s) ['caption']"),
        (lambda d: d["panels"][0]["characters"][0].__setitem__("box", [0.75, 0.1, True, 0.45]), "panels[0].characters[0].box"),
        (lambda d: d.__setitem__("panels", []), "panels"),
        (lambda d: d["panels"][0]["characters"][0].__setitem__("box", [0.0, 0.6, 0.2, 0.9]), "panels[0].characters[0]"),
    ],
)
def test_parse_errors_name_the_path(mutate, path):
    data = json.loads(GOLDEN.read_text())
    mutate(data)
    with pytest.raises(ParseError) as err:
        parse_layout(json.dumps(data))
    assert path in str(err.value)


def test_parse_rejects_non_finite_and_bad_json():
    raw = GOLDEN.read_text().replace("0.7", "NaN", 1)
    with pytest.raises(ParseError):
        parse_layout(raw)
    with pytest.raises(ParseError):
        parse_layout(b"\xff\xfe")
    with pytest.raises(ParseError):
        parse_layout("[1, 2]")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 12))
def test_serialize_is_stable(seed, n):
    rng = np.random.default_rng(seed)
    script = [int(c) for c in rng.integers(0, 5, size=n)]
    once = serialize_layout(generate_layout(script, seed=seed))
    assert serialize_layout(parse_layout(once)) == once


# -- geometry -------------------------------------------------------------------


def test_coverage_examples():
    assert coverage_ratio(page_of((0, 0, 1, 1))) == 1.0
    assert coverage_ratio(page_of((0, 0, 1, 0.5), (0, 0.5, 1, 1))) == 1.0
    assert coverage_ratio(page_of((0, 0, 1, 0.5), (0, 0, 1, 0.5))) == 0.5
    assert raster_union([LayoutBox(0, 0, 1, 0.5)] * 2) == pytest.approx(0.5, abs=5e-3)


def union_oracle_failures(n_sets=500, seed=0, tol=5e-3):
    rng = np.random.default_rng(seed)
    bad = []
    for k in range(n_sets):
        boxes = random_boxes(rng, int(rng.integers(1, 13)))
        exact, approx = union_area(boxes), raster_union(boxes)
        if abs(exact - approx) > tol:
            bad.append((k, exact, approx))
    return bad


def test_union_matches_raster_oracle():
    assert union_oracle_failures(n_sets=60, seed=1) == []


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 12))
def test_coverage_monotone_and_duplicate_invariant(seed, k):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, k)
    base = union_area(boxes)
    assert union_area(boxes + random_boxes(rng, 1)) >= base - 1e-15
    assert union_area(boxes + [boxes[0]]) == pytest.approx(base, abs=1e-15)


# -- metrics --------------------------------------------------------------------


def test_ordering_examples():
    tr, tl = (0.5, 0, 1, 0.5), (0, 0, 0.5, 0.5)
    br, bl = (0.5, 0.5, 1, 1), (0, 0.5, 0.5, 1)
    assert panel_ordering_score([page_of((0, 0, 1, 1))]) == 100.0
    assert panel_ordering_score([page_of(tr, tl, br, bl)]) == 100.0
    assert panel_ordering_score([page_of(tl, tr, bl, br)]) == 0.0
    ltr = LayoutThresholds(right_to_left=False)
    assert panel_ordering_score([page_of(tl, tr, bl, br)], ltr) == 100.0


def test_count_scores():
    page = page_of((0, 0, 0.5, 1), (0.5, 0, 1, 1), chars=[("a", LayoutBox(0.1, 0.1, 0.4, 0.9))])
    assert panel_count_score([page], [2]) == 100.0
    assert panel_count_score([page, page], [2, 3]) == 50.0
    assert character_count_score([page], [[1, 0]]) == 100.0
    assert character_count_score([page], [[1, 2]]) == 50.0
    with pytest.raises(ValidationError):
        panel_count_score([page], [1, 2])


def test_valid_character_examples():
    panel = LayoutBox(0, 0, 0.5, 0.5)

    def score(char):
        return valid_character_score([PageLayout((PanelSpec(panel, (("c", char),)),))])

    assert score(LayoutBox(0.125, 0.125, 0.375, 0.375)) == 100.0
    assert score(LayoutBox(0.6, 0.6, 0.9, 0.9)) == 0.0
    assert score(panel) == 0.0


def test_layout_precision_examples():
    a, b = LayoutBox(0, 0, 0.5, 0.5), LayoutBox(0.5, 0.5, 1, 1)
    targets = [(1, a), (2, b)]
    assert layout_precision(targets, targets) == 100.0
    assert layout_precision([], targets) == 0.0
    # IoU of these two is 0.4
    t = LayoutBox(0, 0, 1, 0.5)
    d = LayoutBox(0, 0, 0.8, 0.25)
    assert t.iou(d) == pytest.approx(0.4)
    assert layout_precision([(1, d)], [(1, t)]) == 0.0
    assert layout_precision([(2, a)], [(1, a)]) == 0.0
    with pytest.raises(ValidationError):
        layout_precision([(1, a), (1, b)], targets)


# -- generator ------------------------------------------------------------------


def test_generator_examples():
    one = generate_layout([0], seed=0)
    assert coverage_ratio(one) >= 0.96
    four = generate_layout([1, 2, 0, 3], seed=1)
    assert panel_ordering_score([four]) == 100.0
    assert serialize_layout(generate_layout([2, 1, 0, 3], seed=7)) == serialize_layout(generate_layout([2, 1, 0, 3], seed=7))


def test_generator_capacity():
    with pytest.raises(CapacityError):
        generate_layout([], seed=0)
    with pytest.raises(CapacityError):
        generate_layout([1] * 13, seed=0)
    with pytest.raises(CapacityError):
        generate_layout([5], seed=0)


def lattice(n=200):
    """Deterministic lattice of ``n`` scripts covering 1..12 panels and 0..4 characters."""
    rng = np.random.default_rng(2024)
    return [(list(map(int, rng.integers(0, 5, size=1 + k % 12))), k) for k in range(n)]


def generator_profile(n=200):
    pages, scripts = [], []
    for script, seed in lattice(n):
        pages.append(generate_layout(script, seed=seed))
        scripts.append(script)
    return layout_metrics(pages, [len(s) for s in scripts], scripts)


def test_generator_profile_on_lattice():
    m = generator_profile(60)
    assert m["panel_count"] == 100.0 and m["panel_ordering"] == 100.0
    assert m["valid_characters"] == 100.0 and m["character_count"] == 100.0
    assert m["coverage_ratio"] >= 75.0


@settings(max_examples=100, deadline=None)
@given(script=st.lists(st.integers(0, 4), min_size=1, max_size=12), seed=st.integers(0, 10**6), rtl=st.booleans())
def test_generator_invariants(script, seed, rtl):
    page = generate_layout(script, seed=seed, right_to_left=rtl)
    th = LayoutThresholds(right_to_left=rtl)
    for panel in page.panels:
        panel.check_containment()
    assert page.character_counts == script
    assert panel_ordering_score([page], th) == 100.0
    assert valid_character_score([page], th) == 100.0
    # panels never overlap, so the union equals the sum of areas
    assert union_area(p.box for p in page.panels) == pytest.approx(sum(p.box.area for p in page.panels))
