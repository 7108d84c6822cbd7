"""3D rotary position embeddings and layout-driven coordinate remapping.

Coordinates are triples ``(t, i, j)``: temporal index, column (width) index
and row (height) index. Head dimensions are laid out as
``[temporal | height | width]`` sub-blocks, each rotated in interleaved pairs.

``regional_coords`` places a reference latent's grid inside a target box:
it keeps the reference aspect ratio (scale by the tighter side), centers
horizontally, aligns vertically by ``align`` (0 top, 0.5 center, 1 bottom),
and maps pixel ``(i, j)`` to ``(0, w0 + (W'/w) i, h0 + (H'/h) j)``. The
top-left pixel lands on the region start; positions are not half-pixel
centered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ValidationError


def _default_split(head_dim: int) -> tuple[int, int, int]:
    d_t = 2 * round(head_dim / 8)
    d_h = 2 * round(3 * head_dim / 16)
    return d_t, d_h, head_dim - d_t - d_h


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    base_frequency: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValidationError(f"head_dim must be a positive even integer, got {self.head_dim}")
        split = tuple(self.axis_split) if self.axis_split else _default_split(self.head_dim)
        if len(split) != 3 or sum(split) != self.head_dim or any(d <= 0 or d % 2 for d in split):
            raise ValidationError(
                f"axis_split {split} must be three positive even sizes summing to {self.head_dim}"
            )
        if not self.base_frequency > 0:
            raise ValidationError("base_frequency must be positive")
        object.__setattr__(self, "axis_split", split)


@dataclass(frozen=True)
class RegionBox:
    w_start: float
    h_start: float
    w_end: float
    h_end: float
    align: float = 0.5

    def __post_init__(self):
        vals = (self.w_start, self.h_start, self.w_end, self.h_end, self.align)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite region box {vals}")
        if not (self.w_start < self.w_end and self.h_start < self.h_end):
            raise ValidationError(
                f"degenerate region box [{self.w_start}, {self.h_start}, {self.w_end}, {self.h_end}]"
            )
        if not 0.0 <= self.align <= 1.0:
            raise ValidationError(f"align must lie in [0, 1], got {self.align}")

    @property
    def width(self) -> float:
        return self.w_end - self.w_start

    @property
    def height(self) -> float:
        return self.h_end - self.h_start

    def as_list(self) -> list[float]:
        return [self.w_start, self.h_start, self.w_end, self.h_end]


@dataclass(frozen=True)
class RopeCoords:
    """Per-token ``(t, i, j)`` rows, row-major over ``grid_dims = (h, w)``."""

    values: np.ndarray
    grid_dims: tuple[int, int]

    def __len__(self) -> int:
        return self.values.shape[0]


def default_coords(grid: tuple[int, int], temporal_index: int = 0) -> RopeCoords:
    h, w = grid
    if h < 1 or w < 1:
        raise ValidationError(f"grid must be at least 1x1, got {grid}")
    jj, ii = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    tt = np.full(h * w, float(temporal_index))
    return RopeCoords(np.stack([tt, ii.ravel(), jj.ravel()], axis=1), (h, w))


def regional_coords(grid: tuple[int, int], box: RegionBox) -> RopeCoords:
    h, w = grid
    if h < 1 or w < 1:
        raise ValidationError(f"grid must be at least 1x1, got {grid}")
    s = min(box.width / w, box.height / h)
    w_fit, h_fit = s * w, s * h
    w0 = box.w_start + (box.width - w_fit) / 2.0
    h0 = box.h_start + box.align * (box.height - h_fit)
    jj, ii = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    ii = w0 + (w_fit / w) * ii.ravel()
    jj = h0 + (h_fit / h) * jj.ravel()
    return RopeCoords(np.stack([np.zeros(h * w), ii, jj], axis=1), (h, w))


def inverse_frequencies(cfg: RopeConfig) -> list[np.ndarray]:
    return [cfg.base_frequency ** (-np.arange(0, d, 2, dtype=float) / d) for d in cfg.axis_split]


def rotation_tables(positions: np.ndarray, cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(cos, sin)`` of shape ``positions.shape[:-1] + (head_dim,)``.

    ``positions[..., :]`` are ``(t, i, j)``; the height block uses ``j`` and
    the width block uses ``i``.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.shape[-1] != 3:
        raise DimensionError(f"coordinates need 3 columns, got {positions.shape}")
    axis_pos = (positions[..., 0], positions[..., 2], positions[..., 1])
    angles = [p[..., None] * f for p, f in zip(axis_pos, inverse_frequencies(cfg))]
    theta = np.repeat(np.concatenate(angles, axis=-1), 2, axis=-1)
    return np.cos(theta), np.sin(theta)


def rotate(qk, coords: RopeCoords | np.ndarray, cfg: RopeConfig) -> nx.Tensor:
    """Rotate ``qk[..., tokens, head_dim]`` by the per-token coordinates."""
    qk = nx.as_tensor(qk)
    values = coords.values if isinstance(coords, RopeCoords) else np.asarray(coords, dtype=float)
    if qk.shape[-1] != cfg.head_dim:
        raise DimensionError(f"head_dim {qk.shape[-1]} does not match config {cfg.head_dim}")
    if qk.shape[-2] != values.shape[-2]:
        raise DimensionError(f"{qk.shape[-2]} tokens but {values.shape[-2]} coordinates")
    cos, sin = rotation_tables(values, cfg)
    return nx.rotate_pairs(qk, cos, sin)
