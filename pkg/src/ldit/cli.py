"""Command-line front end.

    ldit <command> [--config run.json] [--key=value ...]

Every key of ``RunConfig`` is accepted as ``--key=value`` or ``--key value``;
boolean keys may be given bare (``--budget``). ``--in`` is an alias for
``--input``. Outputs go under ``--out``; stdout carries one JSON line.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import FIELD_TYPES, RunConfig, build_config, load_config
from .dit import ReferenceCondition, build_sequence, init_params, sample_euler, write_cam_dump
from .errors import LoadError, RuntimeFailure, ValidationError
from .layout import generate_layout, layout_metrics, parse_layout, serialize_layout
from .ppm import read_ppm, write_ppm
from .rope import RegionBox
from .synthetic import derive_seed, gen_scene, write_dataset
from .trainer import Checkpoint, ablate, eval_set, evaluate, load_checkpoint, sequence_for, train

COMMANDS = ("gen-data", "layout-gen", "layout-eval", "train", "eval", "ablate", "cam-dump", "infer")
ALIASES = {"in": "input"}
# Keys that only steer evaluation; they may differ from the checkpoint's values.
EVAL_KEYS = {"eval_subjects", "eval_scenes", "sampler_steps"}

log = logging.getLogger("ldit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldit", allow_abbrev=False, description="Layout-conditioned toy DiT toolkit.", epilog=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default="", help="JSON file with RunConfig values")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(tokens: Sequence[str]) -> dict:
    """``--key=value`` / ``--key value`` / bare boolean ``--key`` into a dict."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if nxt is None or nxt.startswith("--"):
                value = "true"
                i += 1
            else:
                value = nxt
                i += 2
        key = ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in FIELD_TYPES:
            raise UsageError(f"unrecognized flag --{body.split('=', 1)[0]}")
        if value == "true" and FIELD_TYPES[key] is not bool and "=" not in body:
            raise UsageError(f"flag --{key} needs a value")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# subcommands; each returns (summary fields, output paths)
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path):
    seeds = [derive_seed(cfg.seed, k, cfg.split) for k in range(cfg.n_scenes)]
    mcfg = cfg.model_config()
    write_dataset(out, cfg.split, seeds, cfg.n_subjects, mcfg.canvas, cfg.t_target)
    return {"scenes": len(seeds), "split": cfg.split}, [out / cfg.split / "manifest.jsonl"]


def _script(cfg: RunConfig) -> list[int]:
    if cfg.chars:
        if cfg.panels and cfg.panels != len(cfg.chars):
            raise ValidationError(f"--panels {cfg.panels} disagrees with {len(cfg.chars)} --chars entries")
        return list(cfg.chars)
    if cfg.panels < 1:
        raise ValidationError("layout-gen needs --panels or --chars")
    rng = np.random.default_rng(cfg.seed)
    return [int(c) for c in rng.integers(0, 4, size=cfg.panels)]


def cmd_layout_gen(cfg: RunConfig, out: Path):
    script = _script(cfg)
    page = generate_layout(script, cfg.aspect_ratio, cfg.seed, cfg.right_to_left, cfg.gutter, cfg.panel_jitter)
    path = out / "layout.json"
    path.write_bytes(serialize_layout(page))
    metrics = layout_metrics([page], [len(script)], [script], cfg.thresholds())
    return {"panels": len(script), "metrics": metrics}, [path]


def cmd_layout_eval(cfg: RunConfig, out: Path):
    if not cfg.input:
        raise ValidationError("layout-eval needs --in <layout.json>")
    try:
        raw = Path(cfg.input).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {cfg.input}: {exc.strerror}") from None
    page = parse_layout(raw, strict=False)
    metrics = layout_metrics([page], thresholds=cfg.thresholds())
    path = out / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"metrics": metrics}, [path]


def cmd_train(cfg: RunConfig, out: Path):
    result = train(cfg.train_config(), out)
    last = result.log[-1]
    return {"steps": result.checkpoint.step, "final": last}, [out / "checkpoint.ldit", out / "metrics.jsonl"]


def _checkpoint(cfg: RunConfig, explicit: set[str]) -> Checkpoint:
    if not cfg.checkpoint:
        raise ValidationError("this command needs --checkpoint <file>")
    ckpt = load_checkpoint(cfg.checkpoint)
    wanted = cfg.train_config().to_dict()
    have = ckpt.config.to_dict()
    flat = {**{k: v for k, v in have.items() if k != "model"}, **have["model"]}
    flat_wanted = {**{k: v for k, v in wanted.items() if k != "model"}, **wanted["model"]}
    clash = sorted(k for k in explicit - EVAL_KEYS if k in flat and flat[k] != flat_wanted[k])
    if clash:
        raise LoadError(f"checkpoint was trained with different values for {clash}")
    tc = replace(ckpt.config, **{k: getattr(cfg, k) for k in EVAL_KEYS})
    return Checkpoint(tc, ckpt.params, ckpt.opt_state, ckpt.step)


def cmd_eval(cfg: RunConfig, out: Path, explicit: set[str]):
    ckpt = _checkpoint(cfg, explicit)
    report = evaluate(ckpt, eval_set(ckpt.config))
    path = out / "eval.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {k: report[k] for k in ("layout_precision", "count_match_score", "leakage", "n_samples")}
    return summary, [path]


def cmd_ablate(cfg: RunConfig, out: Path):
    if not cfg.budget:
        raise ValidationError("ablate trains 8 cells per seed; pass --budget to confirm the compute budget")
    table = ablate(cfg.train_config(), cfg.seeds, out)
    sys.stderr.write(table["text"])
    rows = [{k: r[k] for k in ("cell", "layout_precision", "count_match_score", "leakage", "jitter")} for r in table["rows"]]
    return {"rows": rows}, [out / "ablation.json", out / "ablation.txt"]


def _sample_outputs(out: Path, image: np.ndarray, cams: np.ndarray):
    img = out / "generated.ppm"
    write_ppm(img, image)
    return [img] + write_cam_dump(out / "cams", cams)


def cmd_cam_dump(cfg: RunConfig, out: Path, explicit: set[str]):
    ckpt = _checkpoint(cfg, explicit)
    sample = eval_set(ckpt.config, cfg.scene + 1)[cfg.scene]
    mcfg = ckpt.config.model
    seq = sequence_for(sample, mcfg, ckpt.config.use_regional_rope)
    noise = np.random.default_rng(sample.spec.seed).standard_normal((1,) + mcfg.canvas + (mcfg.channels,))
    res = sample_euler(ckpt.params, mcfg, seq, noise, ckpt.config.sampler_steps)
    paths = _sample_outputs(out, res.images[0], res.cams[0])
    return {"scene_seed": sample.spec.seed, "cam_block_index": mcfg.cam_block_index}, paths


def _parse_boxes(text: str, align: float) -> list[RegionBox]:
    boxes = []
    for k, part in enumerate(p for p in text.split(";") if p.strip()):
        try:
            vals = [float(v) for v in part.split(",")]
        except ValueError:
            raise ValidationError(f"box {k} {part!r} is not four numbers") from None
        if len(vals) != 4:
            raise ValidationError(f"box {k} {part!r} needs four numbers w0,h0,w1,h1")
        try:
            boxes.append(RegionBox(*vals, align=align))
        except ValidationError as exc:
            raise ValidationError(f"box {k} {part!r}: {exc}") from None
    return boxes


def cmd_infer(cfg: RunConfig, out: Path, explicit: set[str]):
    """Generate one image. References come from ``--refs`` PPM files or, if
    absent, from the synthetic scene ``--scene`` of the eval split; ``--boxes``
    are in noise-grid units as ``w0,h0,w1,h1;...``."""
    if cfg.checkpoint:
        ckpt = _checkpoint(cfg, explicit)
        tc, params = ckpt.config, ckpt.params
    else:
        tc = cfg.train_config()
        params = init_params(tc.model, tc.seed)
    mcfg = tc.model
    if cfg.refs:
        images = [read_ppm(p) for p in cfg.refs]
        ids = list(range(len(images)))
    else:
        sample = gen_scene(derive_seed(tc.seed, cfg.scene, "eval"), cfg.n_subjects, mcfg.canvas, tc.t_target)
        images, ids = sample.references, sample.condition_ids
    boxes = _parse_boxes(cfg.boxes, mcfg.align) if cfg.boxes else None
    if boxes is None:
        if cfg.refs:
            raise ValidationError("--refs needs matching --boxes")
        boxes = sample.region_boxes(mcfg.patch_size, mcfg.align)
    if len(boxes) != len(images):
        raise ValidationError(f"{len(images)} references but {len(boxes)} boxes")
    refs = [ReferenceCondition(img, box, cid) for img, box, cid in zip(images, boxes, ids)]
    seq = build_sequence(refs, mcfg.noise_grid, ids, mcfg, tc.use_regional_rope)
    noise = np.random.default_rng([tc.seed, cfg.scene]).standard_normal((1,) + mcfg.canvas + (mcfg.channels,))
    res = sample_euler(params, mcfg, seq, noise, tc.sampler_steps)
    paths = _sample_outputs(out, res.images[0], res.cams[0])
    return {"references": len(refs), "boxes": [b.as_list() for b in boxes]}, paths


def dispatch(command: str, cfg: RunConfig, explicit: set[str]) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    handlers = {
        "gen-data": lambda: cmd_gen_data(cfg, out),
        "layout-gen": lambda: cmd_layout_gen(cfg, out),
        "layout-eval": lambda: cmd_layout_eval(cfg, out),
        "train": lambda: cmd_train(cfg, out),
        "eval": lambda: cmd_eval(cfg, out, explicit),
        "ablate": lambda: cmd_ablate(cfg, out),
        "cam-dump": lambda: cmd_cam_dump(cfg, out, explicit),
        "infer": lambda: cmd_infer(cfg, out, explicit),
    }
    fields, paths = handlers[command]()
    return {"command": command, "status": "ok", **fields, "outputs": [str(p) for p in paths], "config": cfg.to_dict()}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = parse_overrides(rest)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"ldit: error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = load_config(args.config)
        cfg = build_config(file_values, overrides)
        summary = dispatch(args.command, cfg, set(file_values) | set(overrides))
    except ValidationError as exc:
        sys.stderr.write(f"ldit: error: {exc}\n")
        print(json.dumps({"command": args.command, "status": "error", "error": str(exc)}))
        return 1
    except (RuntimeFailure, FloatingPointError, MemoryError) as exc:
        sys.stderr.write(f"ldit: runtime failure: {exc}\n")
        print(json.dumps({"command": args.command, "status": "failed", "error": str(exc)}))
        return 2
    print(json.dumps(summary, sort_keys=True))
    return 0


__all__ = ["main", "parse_overrides", "make_parser"]
