"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, visualize, ablate. Settings come
from an optional INI file (``--config``) plus ``--set section.key=value``
overrides. Progress records are written to stderr as JSON lines; command
results go to stdout as JSON.

Exit codes: 0 success, 2 invalid input or configuration, 3 training
diverged, 4 missing or incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import pipeline as P
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig, load_config
from .datasets import load_crop_set, load_video_set, write_scenes
from .experiments import IMAGE_VARIANTS, VIDEO_VARIANTS
from .mask_vq import DivergenceError, save_codec
from .synth_data import AnnotationError, SceneSpec, generate_scene, generate_video
from .visualize import save_panel

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("amodalseg")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"time": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, default=str)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("amodalseg")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _event(name: str, **fields) -> None:
    log.info(name, extra={"fields": fields})


def _progress(step: int, rec: dict) -> None:
    _event("train_step", **rec)


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args, **fixed) -> TrainConfig:
    cfg = load_config(args.config, _parse_overrides(args.set))
    cfg = replace(cfg, **fixed) if fixed else cfg
    cfg.validate()
    return cfg


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=2, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    spec = SceneSpec(height=args.size, width=args.size)
    if args.video:
        spec = replace(spec, n_objects=(4, 8))
    spec.validate()
    scenes = []
    for i in range(args.count):
        rng = np.random.default_rng([args.seed, i])
        if args.video:
            event = bool(rng.random() < args.event_prob)
            frames, _ = generate_video(spec, args.frames, rng, video_id=f"v{args.seed}_{i}", occlusion_event=event)
            scenes.extend(frames)
        else:
            scenes.append(generate_scene(spec, rng, image_id=f"s{args.seed}_{i}"))
    n = write_scenes(args.out, scenes)
    _emit({"out": str(args.out), "images": len(scenes), "instances": n})
    return EXIT_OK


def _load_data(path, cfg: TrainConfig, video: bool, training: bool = False):
    size = cfg.codec.input_size
    data = load_video_set(path, size) if video else load_crop_set(path, size)
    if training and not video:
        data = data.occluded(cfg.min_train_occlusion)
    if len(data) == 0:
        raise ValueError(f"no usable instances under {path}")
    return data


def cmd_train(args) -> int:
    cfg = _config(args, stage=args.stage)
    ckpt = Path(args.ckpt)
    ckpt.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    t0 = time.time()
    if cfg.stage == "vq":
        data = _load_data(args.data, cfg, video=False)
        masks = np.concatenate([data.amodal, data.visible])
        codec, history = P.train_codec(masks, cfg, callback=_progress)
        digest = save_codec(codec, ckpt / P.CODEC_FILE)
        result = {"stage": "vq", "codec_hash": digest}
    elif cfg.stage == "transformer":
        codec = P.load_codec_from(ckpt)
        data = _load_data(args.data, cfg, video=False, training=True)
        model, history = P.train_transformer(codec, data, cfg, callback=_progress)
        digest = P.save_stage(ckpt / P.TRANSFORMER_FILE, "transformer", model.state_dict(), cfg, codec.content_hash())
        result = {"stage": "transformer", "content_hash": digest}
    elif cfg.stage == "refine":
        codec = P.load_codec_from(ckpt)
        model, _, coarse_hash = P.load_coarse(ckpt, codec)
        data = _load_data(args.data, cfg, video=False, training=True)
        net, history = P.train_refine(codec, model, data, cfg, callback=_progress)
        digest = P.save_stage(
            ckpt / P.REFINE_FILE, "refine", net.state_dict(), cfg, codec.content_hash(), {"coarse_hash": coarse_hash}
        )
        result = {"stage": "refine", "content_hash": digest}
    else:
        codec = P.load_codec_from(ckpt)
        data = _load_data(args.data, cfg, video=True)
        model, history = P.train_video_transformer(codec, data, cfg, callback=_progress)
        coarse_hash = P.save_stage(ckpt / P.VIDEO_FILE, "video", model.state_dict(), cfg, codec.content_hash())
        result = {"stage": "video", "content_hash": coarse_hash}
        if not cfg.no_refine:
            net, more = P.train_refine(codec, model, data, cfg, callback=_progress)
            history += more
            P.save_stage(
                ckpt / P.VIDEO_REFINE_FILE, "refine", net.state_dict(), cfg, codec.content_hash(), {"coarse_hash": coarse_hash}
            )
    result.update(seconds=round(time.time() - t0, 1), final=history[-1] if history else None)
    _emit(result)
    return EXIT_OK


def _read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def cmd_infer(args) -> int:
    pipe = P.load_pipeline(args.ckpt, require_refine=not args.coarse_only)
    image = np.asarray(Image.open(args.image).convert("RGB"), np.float32) / 255.0
    visible = _read_mask(args.visible)
    if visible.shape != image.shape[:2]:
        raise ValueError(f"visible mask {visible.shape} does not match image {image.shape[:2]}")
    if not visible.any() and args.bbox is None:
        raise ValueError("empty visible mask needs an explicit --bbox")
    out = P.infer(pipe, image, visible, bbox=args.bbox, K=args.K, seed=args.seed, force_contain=args.force_contain)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out["amodal"].astype(np.uint8) * 255).save(args.out)
    _emit({"out": str(args.out), "window": out["window"], "area": int(out["amodal"].sum())})
    return EXIT_OK


def _strip(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "predictions"}


def cmd_eval(args) -> int:
    pipe = P.load_pipeline(args.ckpt, video=args.video, require_refine=False)
    data = _load_data(args.data, pipe.cfg, video=args.video)
    window = tuple(args.window) if args.window else None
    report = P.evaluate(pipe, data, K=args.K, seed=args.seed, gt_visible=args.gt_visible, occlusion_window=window)
    report = _strip(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, default=_jsonable))
    _emit(report)
    return EXIT_OK


def cmd_visualize(args) -> int:
    pipe = P.load_pipeline(args.ckpt, require_refine=False)
    data = _load_data(args.data, pipe.cfg, video=False)
    if not 0 <= args.index < len(data):
        raise ValueError(f"index {args.index} outside dataset of {len(data)} instances")
    i = args.index
    out = pipe.predict(data.images[i : i + 1], data.visible[i : i + 1], K=args.K, seed=args.seed, keep_trace=True)
    trace = out["traces"][0]
    grid = pipe.codec.cfg.latent_size
    steps = [m[0].numpy() for m in P.decode_trace(pipe.codec, trace, (1, grid, grid))]
    save_panel(args.out, data.images[i], data.visible[i], steps, out["amodal"][0].numpy(), data.amodal[i])
    _emit({"out": str(args.out), "columns": 4 + len(steps)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Train and score ablation variants on top of existing codec (and transformer) checkpoints."""
    base = _config(args, stage="video" if args.video else "refine")
    ckpt = Path(args.ckpt)
    codec = P.load_codec_from(ckpt)
    train = _load_data(args.data, base, video=args.video, training=True)
    test = _load_data(args.eval_data, base, video=args.video)
    variants = VIDEO_VARIANTS if args.video else IMAGE_VARIANTS
    names = args.variants or list(variants)
    rows = {}
    if not args.video:
        model, _, _ = P.load_coarse(ckpt, codec)
        coarse = P.coarse_predict(codec, model, train.images, train.visible, base.K, base.gamma, seed=base.seed)
    for name in names:
        if name not in variants:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(variants)}")
        cfg = replace(base, **variants[name])
        cfg.validate()
        if args.video:
            model, _ = P.train_video_transformer(codec, train, replace(cfg, iterations=args.coarse_iterations or cfg.iterations), _progress)
            net = None
        else:
            net = None if cfg.no_refine else P.train_refine(codec, model, train, cfg, _progress, coarse=coarse)[0]
        report = P.evaluate(P.Pipeline(codec, model, net, cfg), test, seed=cfg.seed, baselines=False)
        rows[name] = {k: report["model"][k] for k in ("miou_full", "miou_occ", "AP", "AR")}
        _event("variant_done", variant=name, **rows[name])
    _emit(rows)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amodalseg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="INI file with [train], [codec], [vq_loss], [model], [masking]")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. model.d=32")
        return p

    g = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=100, help="scenes, or videos with --video")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--video", action="store_true")
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--event-prob", type=float, default=0.7)
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="train one stage"))
    t.add_argument("--stage", choices=["vq", "transformer", "refine", "video"], required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="amodal mask for one object")
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--image", type=Path, required=True)
    i.add_argument("--visible", type=Path, required=True, help="binary PNG of the visible mask")
    i.add_argument("--bbox", type=int, nargs=4, metavar=("X", "Y", "W", "H"))
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--K", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--force-contain", action="store_true", help="union the output with the visible mask")
    i.add_argument("--coarse-only", action="store_true", help="skip refinement if no refine checkpoint")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metrics report with baseline rows")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--K", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gt-visible", action="store_true", help="feed clean GT visible masks")
    e.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), help="occlusion-rate range")
    e.add_argument("--video", action="store_true")
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="write a decode-progression panel")
    v.add_argument("--ckpt", type=Path, required=True)
    v.add_argument("--data", type=Path, required=True)
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--K", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path, required=True)
    v.set_defaults(func=cmd_visualize)

    a = with_config(sub.add_parser("ablate", help="train and compare ablation variants"))
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--eval-data", type=Path, required=True)
    a.add_argument("--video", action="store_true")
    a.add_argument("--variants", nargs="*")
    a.add_argument("--coarse-iterations", type=int, help="video transformer steps per variant")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except DivergenceError as exc:
        _event("error", category="divergence", message=str(exc))
        return EXIT_DIVERGED
    except (P.PrerequisiteError, CheckpointError) as exc:
        _event("error", category="checkpoint", message=str(exc))
        return EXIT_CHECKPOINT
    except (ConfigError, AnnotationError, ValueError, FileNotFoundError) as exc:
        _event("error", category="validation", message=str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
