"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from ldit import numerics as nx
from ldit.dit import ModelConfig, ReferenceCondition, build_sequence, collate, forward, init_params, stacked_cams
from ldit.losses import LossWeights, flow_matching_loss, interpolate, masked_condition_loss, rasterize_mask, total_loss
from ldit.rope import RegionBox

TINY = ModelConfig(d_model=16, n_heads=2, n_blocks=2, noise_grid=(4, 4), cam_block_index=1, time_freq_dim=8)


def random_refs(rng, cfg: ModelConfig, boxes, size=8):
    refs = []
    for k, box in enumerate(boxes):
        img = rng.integers(0, 256, size=(size, size, 3)).astype(np.uint8)
        refs.append(ReferenceCondition(img, box, k))
    return refs


def tiny_problem(seed=0, batch=2, cfg=TINY):
    """A two-reference batch with randomized (non-zero-head) parameters."""
    rng = np.random.default_rng(seed)
    boxes = [RegionBox(0, 0, 2, 2), RegionBox(2, 1, 4, 4)]
    seqs = [build_sequence(random_refs(rng, cfg, boxes), cfg.noise_grid, [0, 1], cfg) for _ in range(batch)]
    seq = collate(seqs)
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in init_params(cfg, seed).items()}
    clean = rng.uniform(-1, 1, size=(batch,) + cfg.canvas + (cfg.channels,))
    noise = rng.standard_normal(clean.shape)
    t = rng.uniform(0.1, 0.9, size=batch)
    masks = np.array([[rasterize_mask(b, cfg.noise_grid) for b in boxes]] * batch)
    return seq, params, clean, noise, t, masks


def tiny_total_loss(seq, clean, noise, t, masks, cfg=TINY, weights=LossWeights()):
    noisy = interpolate(clean, noise, t)

    def f(p):
        v, trace = forward(p, cfg, seq, t, noisy)
        diff = flow_matching_loss(v, clean, noise)
        mask = masked_condition_loss(stacked_cams(trace, seq, cfg.cam_block_index), masks)
        return total_loss(diff, mask, weights)

    return f


def end_to_end_gradcheck(seed=0, max_entries=12, h=1e-5):
    seq, params, clean, noise, t, masks = tiny_problem(seed)
    f = tiny_total_loss(seq, clean, noise, t, masks)
    return nx.finite_difference_check(f, params, h=h, tol=1e-5, max_entries=max_entries, seed=seed)
