"""Toy diffusion transformer with layout-aware rotary positions.

The token sequence is ``[condition | ref_1 ... ref_n | noise]``. Condition
tokens are learned identity embeddings and carry no rotation. Reference
tokens carry either default coordinates (``t = 0`` at the origin) or
coordinates remapped into their target box; noise tokens sit on the native
grid at the target temporal index. Attention is full except that
references never see each other.

Blocks are adaLN-modulated (shift, scale, gate from the diffusion time) and
the velocity head reads only the noise tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import CapacityError, DimensionError, NumericError, ValidationError
from .ppm import heatmap, write_ppm
from .rope import RegionBox, RopeConfig, default_coords, regional_coords, rotation_tables

COND, REF, NOISE = 0, 1, 2
BLOCKED = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 2
    n_blocks: int = 4
    patch_size: int = 4
    noise_grid: tuple[int, int] = (8, 8)
    cam_block_index: int = 1
    t_target: int = 3
    max_references: int = 4
    channels: int = 3
    mlp_ratio: int = 2
    rope_base: float = 100.0
    n_condition_ids: int = 8
    time_freq_dim: int = 32
    align: float = 0.5
    shared_qk: bool = False

    def __post_init__(self):
        object.__setattr__(self, "noise_grid", tuple(int(v) for v in self.noise_grid))
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0 <= self.cam_block_index < self.n_blocks:
            raise ValidationError(f"cam_block_index {self.cam_block_index} outside [0, {self.n_blocks})")
        if self.t_target < 1:
            raise ValidationError(f"t_target must be >= 1, got {self.t_target}")
        if min(self.noise_grid) < 1 or self.patch_size < 1:
            raise ValidationError("noise_grid and patch_size must be positive")
        RopeConfig(self.head_dim, base_frequency=self.rope_base)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, base_frequency=self.rope_base)

    @property
    def canvas(self) -> tuple[int, int]:
        return self.noise_grid[0] * self.patch_size, self.noise_grid[1] * self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["noise_grid"] = tuple(d["noise_grid"])
        return cls(**d)


# ---------------------------------------------------------------------------
# pixels <-> patches
# ---------------------------------------------------------------------------


def to_latent(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=float) / 127.5 - 1.0


def from_latent(latent: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(latent) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., H/p, W/p, p*p*C]`` with (row, col, channel) order."""
    image = np.asarray(image, dtype=float)
    *lead, H, W, C = image.shape
    p = patch_size
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {p}")
    x = image.reshape(*lead, H // p, p, W // p, p, C)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, H // p, W // p, p * p * C)


def unpatchify(tokens: nx.Tensor, grid: tuple[int, int], patch_size: int, channels: int) -> nx.Tensor:
    """Inverse of ``extract_patches`` for a ``[B, h*w, p*p*C]`` tensor."""
    B = tokens.shape[0]
    h, w = grid
    p = patch_size
    x = nx.reshape(tokens, (B, h, w, p, p, channels))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (B, h * p, w * p, channels))


def patchify(image: np.ndarray, patch_size: int, weight, bias) -> nx.Tensor:
    """Linear patch embedding: ``[H, W, C] -> [H/p, W/p, d_model]``."""
    patches = extract_patches(image, patch_size)
    return nx.add(nx.matmul(patches, weight), bias)


# ---------------------------------------------------------------------------
# sequence assembly
# ---------------------------------------------------------------------------


@dataclass
class ReferenceCondition:
    image: np.ndarray
    target_box: RegionBox
    identity_token_id: int

    def latent_grid(self, patch_size: int) -> tuple[int, int]:
        H, W = np.asarray(self.image).shape[:2]
        if H % patch_size or W % patch_size:
            raise DimensionError(f"reference {H}x{W} is not divisible by patch size {patch_size}")
        return H // patch_size, W // patch_size


@dataclass
class TokenSequence:
    """A batch of sequences sharing one segment structure.

    ``coords`` is ``[B, N, 3]``; ``visibility[q, k]`` says whether query
    token ``q`` may attend to key token ``k``.
    """

    kinds: np.ndarray
    ref_index: np.ndarray
    coords: np.ndarray
    visibility: np.ndarray
    noise_grid: tuple[int, int]
    ref_grids: list[tuple[int, int]]
    ref_patches: np.ndarray
    condition_ids: np.ndarray
    boxes: list[list[RegionBox]] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.coords.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.kinds.shape[0]

    @property
    def n_refs(self) -> int:
        return len(self.ref_grids)

    @property
    def cond_slice(self) -> slice:
        return slice(0, self.condition_ids.shape[1])

    @property
    def noise_slice(self) -> slice:
        n = self.noise_grid[0] * self.noise_grid[1]
        return slice(self.n_tokens - n, self.n_tokens)

    def ref_slice(self, i: int) -> slice:
        idx = np.flatnonzero(self.ref_index == i)
        if idx.size == 0:
            raise ValidationError(f"reference {i} has no tokens")
        return slice(int(idx[0]), int(idx[-1]) + 1)

    @property
    def structure(self) -> tuple:
        return (self.condition_ids.shape[1], tuple(self.ref_grids), self.noise_grid)

    def attention_bias(self) -> np.ndarray:
        return np.where(self.visibility, 0.0, BLOCKED)


def _check_box(i: int, box: RegionBox, grid: tuple[int, int]) -> None:
    h, w = grid
    if box.w_start < 0 or box.h_start < 0 or box.w_end > w or box.h_end > h:
        raise ValidationError(
            f"reference {i} box {box.as_list()} lies outside the {h}x{w} noise grid"
        )


def build_sequence(
    refs: Sequence[ReferenceCondition],
    noise_grid: tuple[int, int],
    condition_ids: Sequence[int] | None,
    cfg: ModelConfig,
    regional: bool = True,
) -> TokenSequence:
    if len(refs) > cfg.max_references:
        raise CapacityError(f"{len(refs)} references exceed max_references={cfg.max_references}")
    noise_grid = tuple(noise_grid)
    if condition_ids is None:
        condition_ids = [r.identity_token_id for r in refs]
    cond = np.asarray(condition_ids, dtype=np.intp).reshape(-1)
    if cond.size and (cond.min() < 0 or cond.max() >= cfg.n_condition_ids):
        raise ValidationError(f"condition ids {cond.tolist()} outside [0, {cfg.n_condition_ids})")

    kinds = [np.full(cond.size, COND)]
    ref_index = [np.full(cond.size, -1)]
    coords = [np.zeros((cond.size, 3))]
    grids, patches = [], []
    for i, ref in enumerate(refs):
        _check_box(i, ref.target_box, noise_grid)
        grid = ref.latent_grid(cfg.patch_size)
        rc = regional_coords(grid, ref.target_box) if regional else default_coords(grid, 0)
        grids.append(grid)
        coords.append(rc.values)
        kinds.append(np.full(len(rc), REF))
        ref_index.append(np.full(len(rc), i))
        patches.append(extract_patches(to_latent(ref.image), cfg.patch_size).reshape(len(rc), -1))
    nc = default_coords(noise_grid, cfg.t_target)
    coords.append(nc.values)
    kinds.append(np.full(len(nc), NOISE))
    ref_index.append(np.full(len(nc), -1))

    kinds = np.concatenate(kinds)
    ref_index = np.concatenate(ref_index)
    visibility = np.ones((kinds.size, kinds.size), dtype=bool)
    for a in range(len(refs)):
        for b in range(len(refs)):
            if a != b:
                visibility[np.ix_(ref_index == a, ref_index == b)] = False
    ref_patches = np.concatenate(patches, axis=0) if patches else np.zeros((0, cfg.patch_dim))
    return TokenSequence(
        kinds=kinds,
        ref_index=ref_index,
        coords=np.concatenate(coords)[None],
        visibility=visibility,
        noise_grid=noise_grid,
        ref_grids=grids,
        ref_patches=ref_patches[None],
        condition_ids=cond[None],
        boxes=[[r.target_box for r in refs]],
    )


def collate(seqs: Sequence[TokenSequence]) -> TokenSequence:
    """Stack single sequences that share a structure into one batch."""
    first = seqs[0]
    for s in seqs[1:]:
        if s.structure != first.structure or not np.array_equal(s.visibility, first.visibility):
            raise DimensionError("cannot batch sequences with different structures")
    return replace(
        first,
        coords=np.concatenate([s.coords for s in seqs]),
        ref_patches=np.concatenate([s.ref_patches for s in seqs]),
        condition_ids=np.concatenate([s.condition_ids for s in seqs]),
        boxes=[b for s in seqs for b in s.boxes],
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Parameters in their fixed declared order."""
    rng = np.random.default_rng(seed)
    D, P = cfg.d_model, cfg.patch_dim
    hidden = cfg.mlp_ratio * D

    def dense(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {}
    p["patch.w"] = dense(P, D)
    p["patch.b"] = np.zeros(D)
    p["segment.emb"] = rng.normal(0.0, 1.0, size=(3, D))
    p["cond.emb"] = rng.normal(0.0, 1.0, size=(cfg.n_condition_ids, D))
    p["time.w1"] = dense(cfg.time_freq_dim, D)
    p["time.b1"] = np.zeros(D)
    p["time.w2"] = dense(D, D)
    p["time.b2"] = np.zeros(D)
    for k in range(cfg.n_blocks):
        pre = f"blocks.{k}."
        p[pre + "mod.w"] = dense(D, 6 * D, 0.1)
        mod_b = np.zeros(6 * D)
        mod_b[2 * D : 3 * D] = 1.0  # attention gate
        mod_b[5 * D : 6 * D] = 1.0  # mlp gate
        p[pre + "mod.b"] = mod_b
        p[pre + "qkv.w"] = dense(D, 3 * D)
        p[pre + "qkv.b"] = np.zeros(3 * D)
        p[pre + "out.w"] = dense(D, D, 0.5)
        p[pre + "out.b"] = np.zeros(D)
        p[pre + "mlp.w1"] = dense(D, hidden)
        p[pre + "mlp.b1"] = np.zeros(hidden)
        p[pre + "mlp.w2"] = dense(hidden, D, 0.5)
        p[pre + "mlp.b2"] = np.zeros(D)
    p["final.mod.w"] = dense(D, 2 * D, 0.1)
    p["final.mod.b"] = np.zeros(2 * D)
    p["final.w"] = np.zeros((D, P))
    p["final.b"] = np.zeros(P)
    return p


def param_groups(params) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in params:
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


@dataclass
class ForwardTrace:
    logits: list[nx.Tensor]


def _modulate(x, shift, scale_):
    return nx.add(nx.mul(nx.layer_norm(x), nx.add(scale_, 1.0)), shift)


def attention(params, pre: str, cfg: ModelConfig, h, cos, sin, bias):
    """Multi-head RoPE attention. Returns ``(output, logits)``."""
    B, N, D = h.shape
    H, dh = cfg.n_heads, cfg.head_dim
    qkv = nx.add(nx.matmul(h, params[pre + "qkv.w"]), params[pre + "qkv.b"])
    qkv = nx.transpose(nx.reshape(qkv, (B, N, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    if cfg.shared_qk:
        k = q
    q = nx.rotate_pairs(q, cos, sin)
    k = nx.rotate_pairs(k, cos, sin)
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = nx.softmax_lastdim(nx.add(logits, bias))
    o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, N, D))
    return nx.add(nx.matmul(o, params[pre + "out.w"]), params[pre + "out.b"]), logits


def block_forward(params, k: int, cfg: ModelConfig, x, temb, cos, sin, bias):
    B, _, D = x.shape
    pre = f"blocks.{k}."
    mod = nx.add(nx.matmul(temb, params[pre + "mod.w"]), params[pre + "mod.b"])
    mod = nx.reshape(mod, (B, 1, 6, D))
    sh1, sc1, g1, sh2, sc2, g2 = (mod[:, :, i] for i in range(6))
    att, logits = attention(params, pre, cfg, _modulate(x, sh1, sc1), cos, sin, bias)
    x = nx.add(x, nx.mul(g1, att))
    h = _modulate(x, sh2, sc2)
    h = nx.silu(nx.add(nx.matmul(h, params[pre + "mlp.w1"]), params[pre + "mlp.b1"]))
    h = nx.add(nx.matmul(h, params[pre + "mlp.w2"]), params[pre + "mlp.b2"])
    return nx.add(x, nx.mul(g2, h)), logits


def trunk(params, cfg: ModelConfig, x, temb, coords: np.ndarray, visibility: np.ndarray):
    """Run every block over an arbitrary token order. Returns ``(x, logits per block)``."""
    cos, sin = rotation_tables(coords, cfg.rope)
    cos, sin = cos[:, None], sin[:, None]
    bias = np.where(visibility, 0.0, BLOCKED)
    logits = []
    for k in range(cfg.n_blocks):
        x, lg = block_forward(params, k, cfg, x, temb, cos, sin, bias)
        logits.append(lg)
    return x, logits


def time_embedding(params, cfg: ModelConfig, t) -> nx.Tensor:
    feats = timestep_features(t, cfg.time_freq_dim)
    h = nx.silu(nx.add(nx.matmul(feats, params["time.w1"]), params["time.b1"]))
    h = nx.add(nx.matmul(h, params["time.w2"]), params["time.b2"])
    return nx.silu(h)


def embed(params, cfg: ModelConfig, seq: TokenSequence, noisy_latent: np.ndarray) -> nx.Tensor:
    B = seq.batch
    parts = []
    if seq.condition_ids.shape[1]:
        parts.append(nx.take(params["cond.emb"], seq.condition_ids, axis=0))
    if seq.ref_patches.shape[1]:
        parts.append(nx.add(nx.matmul(seq.ref_patches, params["patch.w"]), params["patch.b"]))
    noise = extract_patches(noisy_latent, cfg.patch_size).reshape(B, -1, cfg.patch_dim)
    parts.append(nx.add(nx.matmul(noise, params["patch.w"]), params["patch.b"]))
    x = nx.concat(parts, axis=1)
    return nx.add(x, nx.take(params["segment.emb"], seq.kinds, axis=0))


def forward(params, cfg: ModelConfig, seq: TokenSequence, t, noisy_latent: np.ndarray):
    """Velocity over the canvas, ``[B, H, W, C]``, plus the attention trace."""
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (seq.batch,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValidationError("diffusion time must lie in [0, 1]")
    noisy_latent = np.asarray(noisy_latent, dtype=float)
    if noisy_latent.shape[1:3] != cfg.canvas:
        raise DimensionError(f"noisy latent {noisy_latent.shape} does not match canvas {cfg.canvas}")
    temb = time_embedding(params, cfg, t)
    x = embed(params, cfg, seq, noisy_latent)
    x, logits = trunk(params, cfg, x, temb, seq.coords, seq.visibility)
    B, D = seq.batch, cfg.d_model
    xn = x[:, seq.noise_slice]
    fm = nx.reshape(nx.add(nx.matmul(temb, params["final.mod.w"]), params["final.mod.b"]), (B, 1, 2, D))
    out = _modulate(xn, fm[:, :, 0], fm[:, :, 1])
    out = nx.add(nx.matmul(out, params["final.w"]), params["final.b"])
    velocity = unpatchify(out, seq.noise_grid, cfg.patch_size, cfg.channels)
    if not np.all(np.isfinite(velocity.data)):
        raise NumericError("non-finite activations in forward pass")
    return velocity, ForwardTrace(logits)


# ---------------------------------------------------------------------------
# cross-attention maps
# ---------------------------------------------------------------------------


def cam_from_logits(logits, grid: tuple[int, int]) -> nx.Tensor:
    """``[..., heads, n_ref, n_noise]`` logits -> min-max normalized ``[..., h, w]`` map."""
    logits = nx.as_tensor(logits)
    if logits.shape[-2] == 0:
        raise ValidationError("reference has no tokens")
    raw = nx.mean(nx.mean(logits, axis=-3), axis=-2)
    norm = nx.minmax_normalize(raw)
    return nx.reshape(norm, norm.shape[:-1] + tuple(grid))


def cam_from_qk(q: np.ndarray, k: np.ndarray, grid: tuple[int, int]) -> nx.Tensor:
    """CAM from explicit ``[heads, n_ref, d]`` queries and ``[heads, n_noise, d]`` keys."""
    q, k = nx.as_tensor(q), nx.as_tensor(k)
    logits = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return cam_from_logits(logits, grid)


def raw_cam(trace: ForwardTrace, seq: TokenSequence, block_index: int, ref: int) -> nx.Tensor:
    """Head- and row-averaged logits ``[B, n_noise]`` before normalization."""
    if not 0 <= block_index < len(trace.logits):
        raise ValidationError(f"block_index {block_index} outside [0, {len(trace.logits)})")
    if not 0 <= ref < seq.n_refs:
        raise ValidationError(f"reference {ref} not present (sequence has {seq.n_refs})")
    lg = trace.logits[block_index][:, :, seq.ref_slice(ref), seq.noise_slice]
    return nx.mean(nx.mean(lg, axis=1), axis=1)


def extract_cam(trace: ForwardTrace, seq: TokenSequence, block_index: int, ref: int) -> nx.Tensor:
    """Normalized ``[B, h, w]`` attention map of reference ``ref`` over the noise grid."""
    norm = nx.minmax_normalize(raw_cam(trace, seq, block_index, ref))
    return nx.reshape(norm, (seq.batch,) + tuple(seq.noise_grid))


def stacked_cams(trace: ForwardTrace, seq: TokenSequence, block_index: int) -> nx.Tensor:
    """All references' maps as ``[B, n_refs, h, w]``."""
    h, w = seq.noise_grid
    maps = [nx.reshape(extract_cam(trace, seq, block_index, i), (seq.batch, 1, h, w)) for i in range(seq.n_refs)]
    return nx.concat(maps, axis=1)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        return nx.minmax_normalize(raw).data


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SampleResult:
    latent: np.ndarray
    cams: np.ndarray  # [B, n_refs, n_blocks, h, w], time-averaged then normalized

    @property
    def images(self) -> np.ndarray:
        return from_latent(self.latent)


def sample_euler(params, cfg: ModelConfig, seq: TokenSequence, noise: np.ndarray, steps: int = 20) -> SampleResult:
    """Integrate the velocity field from ``t = 1`` (noise) to ``t = 0`` with uniform Euler steps."""
    params = {k: nx.as_tensor(v) for k, v in params.items()}
    y = np.asarray(noise, dtype=float).copy()
    ts = np.linspace(1.0, 0.0, steps + 1)
    B, h, w = seq.batch, *seq.noise_grid
    acc = np.zeros((B, seq.n_refs, cfg.n_blocks, h * w))
    with nx.no_grad():
        for a, b in zip(ts[:-1], ts[1:]):
            v, trace = forward(params, cfg, seq, np.full(B, a), y)
            y = y - (a - b) * v.data
            for i in range(seq.n_refs):
                for k in range(cfg.n_blocks):
                    acc[:, i, k] += raw_cam(trace, seq, k, i).data
    cams = normalize_map(acc / steps).reshape(B, seq.n_refs, cfg.n_blocks, h, w)
    return SampleResult(y, cams)


def write_cam_dump(out_dir: str | Path, cams: np.ndarray, upscale: int = 4) -> list[Path]:
    """Write ``cam_r{ref}_b{block}.ppm`` heatmaps from a ``[n_refs, n_blocks, h, w]`` stack."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in range(cams.shape[0]):
        for b in range(cams.shape[1]):
            path = out / f"cam_r{r}_b{b}.ppm"
            write_ppm(path, heatmap(cams[r, b], upscale))
            paths.append(path)
    return paths
