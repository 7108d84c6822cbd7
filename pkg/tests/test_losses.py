import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldit import numerics as nx
from ldit.errors import DimensionError, ValidationError
from ldit.losses import (
    LossWeights,
    flow_matching_loss,
    interpolate,
    leakage,
    masked_condition_loss,
    rasterize_mask,
    total_loss,
)
from ldit.rope import RegionBox


def test_lambda_default():
    assert LossWeights().lambda_mask == 0.05
    with pytest.raises(ValidationError):
        LossWeights(-0.1)
    with pytest.raises(ValidationError):
        LossWeights(float("nan"))


def test_flow_matching_examples():
    rng = np.random.default_rng(0)
    y, eps = rng.standard_normal((2, 2, 4, 4, 3))
    assert flow_matching_loss(eps - y, y, eps).item() == 0.0
    assert flow_matching_loss(np.ones((2, 3)), np.zeros((2, 3)), np.zeros((2, 3))).item() == 1.0
    v = rng.standard_normal(y.shape)
    base = flow_matching_loss(v, y, eps).item()
    doubled = flow_matching_loss(eps - y + 2 * (v - (eps - y)), y, eps).item()
    assert doubled == pytest.approx(4 * base, rel=1e-12)
    with pytest.raises(DimensionError):
        flow_matching_loss(np.ones(3), np.ones(4), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_flow_matching_minimum(seed):
    rng = np.random.default_rng(seed)
    y, eps, d = rng.standard_normal((3, 5, 2))
    best = flow_matching_loss(eps - y, y, eps).item()
    assert best == 0.0
    assert flow_matching_loss(eps - y + 1e-3 * d, y, eps).item() > best


def test_interpolate_endpoints():
    y, eps = np.zeros((2, 3)), np.ones((2, 3))
    assert np.array_equal(interpolate(y, eps, [0.0, 1.0]), [[0, 0, 0], [1, 1, 1]])


def test_rasterize_examples():
    assert np.array_equal(rasterize_mask(RegionBox(0, 0, 4, 4), (4, 4)), np.ones((4, 4)))
    m = rasterize_mask(RegionBox(0, 0, 2, 2), (4, 4))
    assert m[:2, :2].sum() == 4 and m.sum() == 4
    with pytest.raises(ValidationError):
        rasterize_mask(RegionBox(0, 0, 0.4, 0.4), (4, 4))  # no pixel center covered
    with pytest.raises(ValidationError):
        RegionBox(1, 1, 1, 1)


def test_rasterize_partition_of_unity():
    a = rasterize_mask(RegionBox(0, 0, 2.5, 4), (4, 4))
    b = rasterize_mask(RegionBox(2.5, 0, 4, 4), (4, 4))
    assert np.array_equal(a + b, np.ones((4, 4)))


def test_masked_loss_examples():
    mask = np.ones((1, 2, 2))
    assert masked_condition_loss(np.full((1, 2, 2), 0.7), mask).item() == 0.0

    half = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    assert masked_condition_loss(np.ones((1, 2, 2)), half).item() == 0.5

    # per-reference losses 0.2 and 0.4
    cams = np.stack([np.full((2, 2), 0.2), np.full((2, 2), 0.4)])
    masks = np.zeros((2, 2, 2))
    assert masked_condition_loss(cams, masks).item() == pytest.approx(0.3, abs=1e-15)
    assert masked_condition_loss(list(cams), masks).item() == pytest.approx(0.3, abs=1e-15)


def test_masked_loss_count_mismatch():
    with pytest.raises(ValidationError):
        masked_condition_loss(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_masked_loss_monotone_outside_mask(seed):
    rng = np.random.default_rng(seed)
    cams = rng.uniform(0, 1, size=(2, 4, 4))
    masks = (rng.uniform(size=(2, 4, 4)) < 0.5).astype(float)
    base = masked_condition_loss(cams, masks).item()
    outside = np.argwhere(masks == 0)
    if len(outside):
        bumped = cams.copy()
        bumped[tuple(outside[0])] += 0.1
        assert masked_condition_loss(bumped, masks).item() >= base
    inside = np.argwhere(masks == 1)
    if len(inside):
        lowered = cams.copy()
        lowered[tuple(inside[0])] *= 0.5  # stays below the bound of 1
        assert masked_condition_loss(lowered, masks).item() == base


def test_masked_loss_subgradient_at_equality():
    cams = nx.Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with nx.Tape() as tape:
        out = masked_condition_loss(cams, np.ones((1, 2, 2)))
    tape.backward(out)
    assert np.array_equal(cams.grad, np.zeros((1, 2, 2)))


def test_total_loss_examples():
    assert total_loss(nx.Tensor(1.0), nx.Tensor(2.0)).item() == pytest.approx(1.1, abs=1e-15)
    diff = nx.Tensor(0.7)
    assert total_loss(diff, nx.Tensor(9.0), LossWeights(0.0)).item() == 0.7
    vals = [total_loss(nx.Tensor(1.0), nx.Tensor(m)).item() for m in (0.0, 1.0, 2.0)]
    assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-15)


def test_leakage_zero_when_clipped():
    rng = np.random.default_rng(3)
    mask = rasterize_mask(RegionBox(1, 1, 3, 4), (4, 4))
    cam = np.minimum(rng.uniform(size=(4, 4)), mask)
    assert leakage(cam, mask) == 0.0
    assert leakage(np.ones((4, 4)), mask) == pytest.approx((16 - mask.sum()) / 16)
