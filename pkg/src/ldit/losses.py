"""Training objectives: flow matching, layout masks and the masked condition loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ValidationError
from .rope import RegionBox


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = 0.05

    def __post_init__(self):
        if not (np.isfinite(self.lambda_mask) and self.lambda_mask >= 0):
            raise ValidationError(f"lambda_mask must be finite and >= 0, got {self.lambda_mask}")


def flow_matching_loss(v_pred, clean, noise) -> nx.Tensor:
    """Mean squared error between the predicted velocity and ``noise - clean``."""
    v_pred = nx.as_tensor(v_pred)
    clean = np.asarray(clean.data if isinstance(clean, nx.Tensor) else clean, dtype=float)
    noise = np.asarray(noise.data if isinstance(noise, nx.Tensor) else noise, dtype=float)
    if not (v_pred.shape == clean.shape == noise.shape):
        raise DimensionError(
            f"flow matching shapes differ: {v_pred.shape}, {clean.shape}, {noise.shape}"
        )
    return nx.mean(nx.square(nx.sub(v_pred, noise - clean)))


def interpolate(clean: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    """``(1 - t) * clean + t * noise`` with ``t`` broadcast per leading item."""
    t = np.asarray(t, dtype=float).reshape((-1,) + (1,) * (clean.ndim - 1))
    return (1.0 - t) * clean + t * noise


def rasterize_mask(box: RegionBox, noise_grid: tuple[int, int]) -> np.ndarray:
    """1 where a latent pixel's center lies in ``[w_start, w_end) x [h_start, h_end)``."""
    h, w = noise_grid
    cy = np.arange(h) + 0.5
    cx = np.arange(w) + 0.5
    rows = (cy >= box.h_start) & (cy < box.h_end)
    cols = (cx >= box.w_start) & (cx < box.w_end)
    mask = (rows[:, None] & cols[None, :]).astype(float)
    if not mask.any():
        raise ValidationError(f"box {box.as_list()} covers no pixel centers of a {h}x{w} grid")
    return mask


def masked_condition_loss(cams, masks) -> nx.Tensor:
    """Average over references of the spatial mean of ``relu(cam - mask)``.

    ``cams`` is ``[..., n_refs, h, w]`` (a Tensor, array or list of maps);
    ``masks`` matches it. Leading axes (batch) are averaged too.
    """
    if isinstance(cams, (list, tuple)):
        cams = nx.concat([nx.reshape(nx.as_tensor(c), (1,) + nx.as_tensor(c).shape) for c in cams], 0)
    cams = nx.as_tensor(cams)
    masks = np.asarray(masks, dtype=float)
    if masks.ndim == cams.ndim and masks.shape[-3] != cams.shape[-3]:
        raise ValidationError(f"{cams.shape[-3]} attention maps but {masks.shape[-3]} masks")
    if masks.shape != cams.shape:
        raise DimensionError(f"mask shape {masks.shape} does not match maps {cams.shape}")
    return nx.mean(nx.relu(nx.sub(cams, masks)))


def leakage(cam: np.ndarray, mask: np.ndarray) -> float:
    """Spatial mean of ``relu(cam - mask)`` for plain arrays."""
    return float(np.maximum(np.asarray(cam) - np.asarray(mask), 0.0).mean())


def total_loss(diff, mask, weights: LossWeights = LossWeights()) -> nx.Tensor:
    if weights.lambda_mask == 0.0:
        return nx.as_tensor(diff)
    return nx.add(diff, nx.scale(mask, weights.lambda_mask))
