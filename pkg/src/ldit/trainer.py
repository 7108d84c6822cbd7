"""Training, checkpointing, evaluation and the ablation harness.

Determinism: everything random in step ``s`` comes from
``default_rng([seed, s])`` and from scene seeds derived from
``(seed, s * batch + b)``, so a resumed run replays the same batches.
Batches are bucketed by box sizes so every item shares one sequence
structure; per-item gradients are reduced by the batched kernels in a fixed
order.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dit import (
    ModelConfig,
    ReferenceCondition,
    TokenSequence,
    build_sequence,
    collate,
    forward,
    init_params,
    sample_euler,
    stacked_cams,
    to_latent,
)
from .errors import GenerationError, LoadError, NumericError, ValidationError
from .layout import layout_precision
from .losses import LossWeights, flow_matching_loss, interpolate, leakage, masked_condition_loss, rasterize_mask, total_loss
from .synthetic import PairedSample, box_sizes, count_match_score, derive_seed, detect_subjects, gen_scene, mean_jitter

log = logging.getLogger(__name__)

MAGIC = b"LDIT1"
TIMESTAMPS = (1, 3, 5, 9)
TIME_SAMPLING = ("uniform", "logit_normal")


@dataclass(frozen=True)
class TrainConfig:
    steps_single: int = 2000
    steps_multi: int = 1000
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.01
    lambda_mask: float = 0.05
    use_regional_rope: bool = True
    use_masked_loss: bool = True
    t_target: int = 3
    seed: int = 0
    multi_subjects: tuple[int, ...] = (2, 3)
    eval_subjects: int = 3
    eval_scenes: int = 32
    sampler_steps: int = 20
    time_sampling: str = "uniform"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "multi_subjects", tuple(int(n) for n in self.multi_subjects))
        if self.steps_single < 0 or self.steps_multi < 0 or self.steps_single + self.steps_multi < 1:
            raise ValidationError("step counts must be non-negative with a positive total")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if not self.lr > 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if not self.multi_subjects or not all(1 <= n <= self.model.max_references for n in self.multi_subjects):
            raise ValidationError(f"multi_subjects {self.multi_subjects} outside [1, max_references]")
        if self.time_sampling not in TIME_SAMPLING:
            raise ValidationError(f"time_sampling must be one of {TIME_SAMPLING}, got {self.time_sampling!r}")
        LossWeights(self.lambda_mask)
        if self.model.t_target != self.t_target:
            object.__setattr__(self, "model", replace(self.model, t_target=self.t_target))

    @property
    def total_steps(self) -> int:
        return self.steps_single + self.steps_multi

    @property
    def mask_in_gradient(self) -> bool:
        return self.use_masked_loss and self.lambda_mask > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multi_subjects"] = list(self.multi_subjects)
        d["model"] = self.model.to_dict()
        d["model"]["noise_grid"] = list(self.model.noise_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown training config keys: {unknown}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def references_for(sample: PairedSample, cfg: ModelConfig) -> list[ReferenceCondition]:
    return [
        ReferenceCondition(img, box, cid)
        for img, box, cid in zip(sample.references, sample.region_boxes(cfg.patch_size, cfg.align), sample.condition_ids)
    ]


def sequence_for(sample: PairedSample, cfg: ModelConfig, regional: bool) -> TokenSequence:
    return build_sequence(references_for(sample, cfg), cfg.noise_grid, sample.condition_ids, cfg, regional)


def masks_for(seq: TokenSequence) -> np.ndarray:
    return np.array([[rasterize_mask(b, seq.noise_grid) for b in boxes] for boxes in seq.boxes]).reshape(
        (seq.batch, seq.n_refs) + tuple(seq.noise_grid)
    )


@dataclass
class Batch:
    samples: list[PairedSample]
    seq: TokenSequence
    clean: np.ndarray
    noise: np.ndarray
    t: np.ndarray
    masks: np.ndarray

    @property
    def noisy(self) -> np.ndarray:
        return interpolate(self.clean, self.noise, self.t)


def make_batch(cfg: TrainConfig, step: int) -> Batch:
    """The deterministic batch for ``step`` (single-subject phase first)."""
    mcfg = cfg.model
    rng = np.random.default_rng([cfg.seed, step])
    n = 1 if step < cfg.steps_single else int(rng.choice(cfg.multi_subjects))
    allowed = box_sizes(mcfg.canvas, mcfg.patch_size)
    samples = None
    for attempt in range(8):
        sizes = [(int(rng.choice(allowed)), int(rng.choice(allowed))) for _ in range(n)]
        try:
            samples = [
                gen_scene(derive_seed(cfg.seed, (step * cfg.batch_size + b) * 8 + attempt), n, mcfg.canvas, cfg.t_target, sizes, mcfg.patch_size)
                for b in range(cfg.batch_size)
            ]
            break
        except GenerationError:
            continue
    if samples is None:
        raise GenerationError(f"step {step}: no feasible box sizes for {n} subjects")
    seq = collate([sequence_for(s, mcfg, cfg.use_regional_rope) for s in samples])
    clean = np.stack([to_latent(s.target) for s in samples])
    noise = rng.standard_normal(clean.shape)
    if cfg.time_sampling == "uniform":
        t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
    else:
        t = 1.0 / (1.0 + np.exp(-rng.standard_normal(cfg.batch_size)))
    return Batch(samples, seq, clean, noise, t, masks_for(seq))


def eval_set(cfg: TrainConfig, count: int | None = None, n_subjects: int | None = None) -> list[PairedSample]:
    """Held-out scenes; their seeds can never collide with training seeds."""
    mcfg = cfg.model
    count = cfg.eval_scenes if count is None else count
    n = cfg.eval_subjects if n_subjects is None else n_subjects
    return [gen_scene(derive_seed(cfg.seed, k, "eval"), n, mcfg.canvas, cfg.t_target, None, mcfg.patch_size) for k in range(count)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    opt_state: nx.AdamState
    step: int


def _write_array(buf, a: np.ndarray) -> None:
    buf.write(struct.pack("<B", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = buf.read(8 * count)
    if len(raw) != 8 * count:
        raise LoadError("truncated checkpoint array")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Layout: magic, u32+JSON config, u64 step, u32 count, then per parameter
    (u16+name, array); then u64 optimizer step and first/second moments in
    the same order. Arrays are u8 ndim, u32 dims, little-endian f64 data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    conf = json.dumps(ckpt.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(conf)) + conf)
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        _write_array(buf, arr)
    buf.write(struct.pack("<Q", ckpt.opt_state.step))
    for name, arr in ckpt.params.items():
        _write_array(buf, ckpt.opt_state.m.get(name, np.zeros_like(arr)))
        _write_array(buf, ckpt.opt_state.v.get(name, np.zeros_like(arr)))
    return buf.getvalue()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise LoadError("not a checkpoint (bad magic)")
    try:
        (clen,) = struct.unpack("<I", buf.read(4))
        config = TrainConfig.from_dict(json.loads(buf.read(clen)))
        (step,) = struct.unpack("<Q", buf.read(8))
        (count,) = struct.unpack("<I", buf.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", buf.read(2))
            name = buf.read(nlen).decode()
            params[name] = _read_array(buf)
        (opt_step,) = struct.unpack("<Q", buf.read(8))
        m, v = {}, {}
        for name in params:
            m[name] = _read_array(buf)
            v[name] = _read_array(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise LoadError(f"corrupt checkpoint: {exc}") from None
    if buf.read(1):
        raise LoadError("trailing bytes after checkpoint")
    expected = init_params(config.model, 0)
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in params):
        raise LoadError("checkpoint parameters do not match its model config")
    return Checkpoint(config, params, nx.AdamState(opt_step, m, v), step)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return parse_checkpoint(data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class StepLosses:
    diff: float
    mask: float
    total: float


def step_losses(params: dict[str, nx.Tensor], cfg: TrainConfig, batch: Batch):
    """Forward pass plus the three loss values; returns ``(total, StepLosses)``."""
    mcfg = cfg.model
    velocity, trace = forward(params, mcfg, batch.seq, batch.t, batch.noisy)
    diff = flow_matching_loss(velocity, batch.clean, batch.noise)
    if batch.seq.n_refs:
        mask = masked_condition_loss(stacked_cams(trace, batch.seq, mcfg.cam_block_index), batch.masks)
    else:
        mask = nx.Tensor(0.0)
    weights = LossWeights(cfg.lambda_mask if cfg.use_masked_loss else 0.0)
    total = total_loss(diff, mask, weights)
    return total, StepLosses(diff.item(), mask.item(), total.item())


def _dump_batch(out_dir: Path | None, step: int, batch: Batch) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_step{step}.npz"
    np.savez(
        path,
        clean=batch.clean,
        noise=batch.noise,
        t=batch.t,
        coords=batch.seq.coords,
        seeds=np.array([s.spec.seed for s in batch.samples]),
    )
    return path


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    progress: Callable[[int, StepLosses], None] | None = None,
) -> TrainResult:
    """Run (or continue) training. ``stop_after`` halts once that many total
    steps are done, which is how interrupted runs are simulated."""
    if resume is not None:
        if resume.config != cfg:
            raise LoadError("checkpoint config does not match the requested training config")
        params, state, start = dict(resume.params), resume.opt_state, resume.step
    else:
        params, state, start = init_params(cfg.model, cfg.seed), nx.AdamState(), 0
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    log_file = open(out / "metrics.jsonl", "a" if resume else "w", encoding="utf-8") if out else None
    try:
        for step in range(start, end):
            batch = make_batch(cfg, step)
            leaves = nx.parameters(params)
            with nx.Tape() as tape:
                total, losses = step_losses(leaves, cfg, batch)
            if not all(np.isfinite([losses.diff, losses.mask, losses.total])):
                dump = _dump_batch(out, step, batch)
                raise NumericError(f"non-finite loss at step {step} ({losses}); batch dumped to {dump}")
            tape.backward(total)
            params, state = nx.adamw_step(
                params, nx.grads_of(leaves), state, lr=cfg.lr, weight_decay=cfg.weight_decay
            )
            rec = {"step": step, "diff": losses.diff, "mask": losses.mask, "total": losses.total}
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if progress:
                progress(step, losses)
    finally:
        if log_file:
            log_file.close()
    ckpt = Checkpoint(cfg, params, state, end)
    if out is not None:
        save_checkpoint(out / "checkpoint.ldit", ckpt)
    return TrainResult(ckpt, records)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


Generator = Callable[[PairedSample], tuple[np.ndarray, np.ndarray | None]]


def model_generator(ckpt: Checkpoint, steps: int | None = None) -> Generator:
    """Sample with the checkpoint; returns ``(image, cam stack [refs, blocks, h, w])``."""
    cfg = ckpt.config
    steps = cfg.sampler_steps if steps is None else steps
    params = {k: nx.Tensor(v) for k, v in ckpt.params.items()}

    def generate(sample: PairedSample):
        seq = sequence_for(sample, cfg.model, cfg.use_regional_rope)
        noise = np.random.default_rng(sample.spec.seed).standard_normal((1,) + cfg.model.canvas + (cfg.model.channels,))
        res = sample_euler(params, cfg.model, seq, noise, steps)
        return res.images[0], res.cams[0]

    return generate


def score_sample(sample: PairedSample, image: np.ndarray, cams: np.ndarray | None, cfg: ModelConfig, cam_block: int) -> dict:
    found = detect_subjects(image, sample.spec.palette)
    rec = {
        "seed": sample.spec.seed,
        "layout_precision": layout_precision(found, sample.targets()),
        "detected": len(found),
        "expected": sample.n_subjects,
    }
    if cams is not None:
        grid = cfg.noise_grid
        masks = [rasterize_mask(b, grid) for b in sample.region_boxes(cfg.patch_size, cfg.align)]
        rec["leakage"] = float(np.mean([leakage(cams[i, cam_block], m) for i, m in enumerate(masks)]))
    return rec


def evaluate(ckpt: Checkpoint, samples: Sequence[PairedSample], generator: Generator | None = None) -> dict:
    """Layout precision, count match and CAM leakage over ``samples``."""
    cfg = ckpt.config
    generator = generator or model_generator(ckpt)
    per_sample = []
    for sample in samples:
        image, cams = generator(sample)
        per_sample.append(score_sample(sample, image, cams, cfg.model, cfg.model.cam_block_index))
    report = {
        "layout_precision": float(np.mean([r["layout_precision"] for r in per_sample])),
        "count_match_score": count_match_score([r["detected"] for r in per_sample], [r["expected"] for r in per_sample]),
        "n_samples": len(per_sample),
        "samples": per_sample,
    }
    leaks = [r["leakage"] for r in per_sample if "leakage" in r]
    report["leakage"] = float(np.mean(leaks)) if leaks else None
    return report


def training_leakage(ckpt: Checkpoint, steps: Sequence[int]) -> float:
    """Mean CAM leakage of the checkpoint on the given training batches."""
    cfg = ckpt.config
    params = {k: nx.Tensor(v) for k, v in ckpt.params.items()}
    vals = []
    with nx.no_grad():
        for s in steps:
            batch = make_batch(cfg, s)
            _, trace = forward(params, cfg.model, batch.seq, batch.t, batch.noisy)
            cams = stacked_cams(trace, batch.seq, cfg.model.cam_block_index).data
            vals.append(float(np.maximum(cams - batch.masks, 0).mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def ablation_cells(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Loss grid at ``t = 3`` followed by the timestamp sweep with both features on."""
    cells = []
    for rope in (True, False):
        for masked in (True, False):
            name = f"rope={'on' if rope else 'off'} mask={'on' if masked else 'off'} t=3"
            cells.append((name, replace(base, use_regional_rope=rope, use_masked_loss=masked, t_target=3)))
    for t in TIMESTAMPS:
        cells.append((f"sweep t={t}", replace(base, use_regional_rope=True, use_masked_loss=True, t_target=t)))
    return cells


def run_cell(cfg: TrainConfig, out_dir: str | Path | None = None) -> dict:
    start = time.time()
    result = train(cfg, out_dir)
    samples = eval_set(cfg)
    report = evaluate(result.checkpoint, samples)
    return {
        "use_regional_rope": cfg.use_regional_rope,
        "use_masked_loss": cfg.use_masked_loss,
        "t_target": cfg.t_target,
        "seed": cfg.seed,
        "layout_precision": report["layout_precision"],
        "count_match_score": report["count_match_score"],
        "leakage": report["leakage"],
        "jitter": mean_jitter(samples),
        "final_total": result.log[-1]["total"],
        "seconds": round(time.time() - start, 1),
    }


def _cell_key(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def worker_count() -> int:
    try:
        cap = int(os.environ.get("LDIT_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def ablate(
    base: TrainConfig,
    seeds: Sequence[int] = (0,),
    out_dir: str | Path | None = None,
    runner: Callable[[TrainConfig], dict] | None = None,
) -> dict:
    """Train and evaluate every ablation cell for each seed.

    Identical configurations (the ``t = 3`` sweep row duplicates the full
    loss-grid row) are trained once. Rows report per-seed values and means.
    ``runner`` replaces :func:`run_cell` (e.g. to reuse cached runs); custom
    runners are called serially.
    """
    cells = ablation_cells(base)
    jobs: dict[str, TrainConfig] = {}
    for _, cfg in cells:
        for s in seeds:
            c = replace(cfg, seed=int(s))
            jobs.setdefault(_cell_key(c), c)
    out = Path(out_dir) if out_dir is not None else None
    results: dict[str, dict] = {}
    workers = worker_count()
    if runner is not None:
        results = {k: runner(c) for k, c in jobs.items()}
    elif workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {k: pool.submit(run_cell, c) for k, c in jobs.items()}
            results = {k: f.result() for k, f in futures.items()}
    else:
        for k, c in jobs.items():
            results[k] = run_cell(c)
            log.info("cell %s -> %s", k[:80], results[k])

    rows = []
    metrics = ("layout_precision", "count_match_score", "leakage", "jitter")
    for name, cfg in cells:
        per_seed = [results[_cell_key(replace(cfg, seed=int(s)))] for s in seeds]
        row = {
            "cell": name,
            "use_regional_rope": cfg.use_regional_rope,
            "use_masked_loss": cfg.use_masked_loss,
            "t_target": cfg.t_target,
            "per_seed": per_seed,
        }
        for m in metrics:
            row[m] = float(np.mean([r[m] for r in per_seed]))
        rows.append(row)
    table = {"seeds": list(seeds), "rows": rows, "text": format_table(rows)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True), encoding="utf-8")
        (out / "ablation.txt").write_text(table["text"], encoding="utf-8")
    return table


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'cell':<28} {'layout_prec':>11} {'count_match':>11} {'leakage':>8} {'jitter':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['cell']:<28} {r['layout_precision']:>11.2f} {r['count_match_score']:>11.2f} "
            f"{r['leakage']:>8.4f} {r['jitter']:>7.4f}"
        )
    return "\n".join(lines) + "\n"
