"""Desk-scale experiments behind the acceptance suite and ``scripts/``.

`DeskExperiment` trains (or loads from a cache) every artifact the
end-to-end checks need: one shared codec, a coarse model and refinement
variants per seed, and video models per seed and variant. Artifacts are
keyed by a hash of the settings that produced them and record their
training time, so cached reruns still report honest runtimes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import pipeline as P
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import TrainConfig, to_dict
from .datasets import CropSet, VideoCropSet, build_image_set, build_video_set
from .mask_vq import load_codec, roundtrip_iou, save_codec

log = logging.getLogger(__name__)

IMAGE_VARIANTS = {
    "full": {},
    "single_branch": {"single_branch": True},
    "no_attention": {"no_attention": True},
    "no_refine": {"no_refine": True},
}
VIDEO_VARIANTS = {"full": {}, "no_roll": {"no_roll": True}, "no_sttb": {"no_sttb": True}}


@dataclass(frozen=True)
class DeskRecipe:
    # data
    train_scenes: int = 3000
    data_seed: int = 1
    test_scenes: int = 120
    test_seed: int = 99
    window: tuple[float, float] = (0.1, 0.7)
    codec_scenes: int = 400
    codec_masks: int = 2000
    heldout_masks: int = 1000
    # optimisation
    learning_rate: float = 1e-3
    batch_size: int = 32
    warmup_steps: int = 200
    codec_steps: int = 5000
    transformer_steps: int = 5000
    refine_steps: int = 8000
    min_train_occlusion: float = 0.05
    refine_backbone: str = "finetune"
    K: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    # video
    video_train: int = 2000
    video_test: int = 300
    video_steps: int = 3000
    video_batch: int = 16

    def config(self, stage: str, seed: int = 0, **flags) -> TrainConfig:
        iterations = {
            "vq": self.codec_steps,
            "transformer": self.transformer_steps,
            "refine": self.refine_steps,
            "video": self.video_steps,
        }[stage]
        cfg = TrainConfig(
            stage=stage,
            learning_rate=self.learning_rate,
            batch_size=self.video_batch if stage == "video" else self.batch_size,
            iterations=iterations,
            warmup_steps=self.warmup_steps,
            min_train_occlusion=self.min_train_occlusion,
            refine_backbone=self.refine_backbone,
            K=self.K,
            seed=seed,
            log_every=500,
            **flags,
        )
        cfg.validate()
        return cfg

    def quick(self) -> "DeskRecipe":
        """A minutes-long variant for smoke runs; its numbers mean little."""
        return replace(
            self,
            train_scenes=200,
            test_scenes=30,
            codec_scenes=60,
            codec_masks=500,
            heldout_masks=200,
            codec_steps=300,
            transformer_steps=300,
            refine_steps=300,
            video_train=100,
            video_test=40,
            video_steps=200,
            warmup_steps=20,
        )


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def default_cache_dir() -> Path:
    return Path(os.environ.get("AMODALSEG_CACHE", ".acceptance_cache"))


def coverage(pred: np.ndarray, amodal: np.ndarray) -> float:
    """Fraction of the GT amodal area covered by the prediction."""
    area = amodal.sum()
    return float((pred & amodal).sum() / area) if area else 1.0


@dataclass
class DeskExperiment:
    recipe: DeskRecipe = field(default_factory=DeskRecipe)
    cache_dir: Path = field(default_factory=default_cache_dir)
    retrain: bool = field(default_factory=lambda: os.environ.get("AMODALSEG_RETRAIN", "") == "1")

    def __post_init__(self):
        self.cache_dir = Path(self.cache_dir)
        self._coarse: dict[int, tuple[P.CoarseModel, float]] = {}
        self._train_coarse: dict[int, dict] = {}
        self._refine: dict[tuple[int, str], tuple[P.RefineStage | None, float]] = {}
        self._video: dict[tuple[int, str], tuple[P.CoarseModel, float]] = {}
        self._codec = None

    # ------------------------------------------------------------ data

    @cached_property
    def train_set(self) -> CropSet:
        r = self.recipe
        return build_image_set(r.train_scenes, r.data_seed).occluded(r.min_train_occlusion)

    @cached_property
    def test_set(self) -> CropSet:
        r = self.recipe
        return build_image_set(r.test_scenes, r.test_seed).in_window(*r.window)

    def _mask_pool(self, data: CropSet, n: int, seed: int) -> np.ndarray:
        """Half amodal, half visible masks drawn without replacement."""
        rng = np.random.default_rng(seed)
        pool = np.concatenate([data.amodal, data.visible])
        return pool[rng.permutation(len(pool))[:n]]

    @cached_property
    def codec_masks(self) -> np.ndarray:
        r = self.recipe
        return self._mask_pool(build_image_set(r.codec_scenes, r.data_seed), r.codec_masks, r.data_seed)

    @cached_property
    def heldout_masks(self) -> np.ndarray:
        r = self.recipe
        return self._mask_pool(build_image_set(r.test_scenes, r.test_seed), r.heldout_masks, r.test_seed)

    @cached_property
    def video_train_set(self) -> VideoCropSet:
        return build_video_set(self.recipe.video_train, self.recipe.data_seed)

    @cached_property
    def video_test_set(self) -> VideoCropSet:
        return build_video_set(self.recipe.video_test, self.recipe.test_seed)

    # ------------------------------------------------------------ cache plumbing

    def _path(self, name: str, key: str) -> Path:
        return self.cache_dir / f"{name}-{key}.ckpt"

    def _cached(self, path: Path):
        if self.retrain or not path.exists():
            return None
        return load_checkpoint(path)

    # ------------------------------------------------------------ codec

    def codec(self):
        """The shared codec and its training seconds."""
        if self._codec is not None:
            return self._codec
        r = self.recipe
        cfg = r.config("vq")
        key = _key("codec", to_dict(cfg), r.codec_scenes, r.data_seed, r.codec_masks)
        path = self._path("codec", key)
        if path.exists() and not self.retrain:
            codec, seconds = load_codec(path), read_header(path)["seconds"]
        else:
            log.info("training codec on %d masks", r.codec_masks)
            t0 = time.perf_counter()
            codec, _ = P.train_codec(self.codec_masks, cfg)
            seconds = time.perf_counter() - t0
            save_codec(codec, path, {"seconds": seconds})
        self._codec = (codec, seconds)
        return self._codec

    def codec_roundtrip(self) -> dict:
        codec, seconds = self.codec()
        ious = roundtrip_iou(codec, self.heldout_masks)
        used = len(np.unique(P.tokenize(codec, self.heldout_masks).numpy()))
        return {"heldout_iou": float(ious.mean()), "seconds": seconds, "codes_used": used}

    # ------------------------------------------------------------ image model

    def coarse(self, seed: int) -> tuple[P.CoarseModel, float]:
        if seed in self._coarse:
            return self._coarse[seed]
        codec, _ = self.codec()
        r = self.recipe
        cfg = r.config("transformer", seed)
        key = _key("coarse", to_dict(cfg), codec.content_hash(), r.train_scenes, r.data_seed)
        path = self._path(f"coarse{seed}", key)
        model = P.new_coarse_model(cfg)
        cached = self._cached(path)
        if cached:
            model.load_state_dict(cached[1])
            seconds = cached[0]["seconds"]
        else:
            log.info("training coarse model, seed %d", seed)
            t0 = time.perf_counter()
            model, _ = P.train_transformer(codec, self.train_set, cfg)
            seconds = time.perf_counter() - t0
            save_checkpoint(path, {"seconds": seconds}, model.state_dict())
        self._coarse[seed] = (model.eval(), seconds)
        return self._coarse[seed]

    def refine(self, seed: int, variant: str = "full") -> tuple[P.RefineStage | None, float]:
        """Refinement stage for one ablation variant; seconds include coarse decoding of the train set."""
        if (seed, variant) in self._refine:
            return self._refine[(seed, variant)]
        cfg = self.recipe.config("refine", seed, **IMAGE_VARIANTS[variant])
        if cfg.no_refine:
            self._refine[(seed, variant)] = (None, 0.0)
            return self._refine[(seed, variant)]
        codec, _ = self.codec()
        model, _ = self.coarse(seed)
        key = _key("refine", to_dict(cfg), model.content_hash())
        path = self._path(f"refine{seed}-{variant}", key)
        stage = P.new_refine(cfg)
        cached = self._cached(path)
        if cached:
            stage.load_state_dict(cached[1])
            seconds = cached[0]["seconds"]
        else:
            log.info("training refinement %s, seed %d", variant, seed)
            t0 = time.perf_counter()
            if seed not in self._train_coarse:
                data = self.train_set
                self._train_coarse[seed] = P.coarse_predict(codec, model, data.images, data.visible, cfg.K, cfg.gamma, seed=seed)
            stage, _ = P.train_refine(codec, model, self.train_set, cfg, coarse=self._train_coarse[seed])
            seconds = time.perf_counter() - t0
            save_checkpoint(path, {"seconds": seconds}, stage.state_dict())
        self._refine[(seed, variant)] = (stage.eval(), seconds)
        return self._refine[(seed, variant)]

    def image_pipeline(self, seed: int = 0, variant: str = "full") -> P.Pipeline:
        codec, _ = self.codec()
        model, _ = self.coarse(seed)
        stage, _ = self.refine(seed, variant)
        return P.Pipeline(codec, model, stage, self.recipe.config("refine", seed, **IMAGE_VARIANTS[variant]))

    def image_training_seconds(self, seed: int = 0, variant: str = "full") -> float:
        self.image_pipeline(seed, variant)
        return self.codec()[1] + self.coarse(seed)[1] + self.refine(seed, variant)[1]

    def evaluate_image(self, seed: int = 0, variant: str = "full", K: int | None = None, gt_visible: bool = True) -> dict:
        pipe = self.image_pipeline(seed, variant)
        t0 = time.perf_counter()
        report = P.evaluate(pipe, self.test_set, K=K, seed=seed, gt_visible=gt_visible)
        report["eval_seconds"] = time.perf_counter() - t0
        return report

    # ------------------------------------------------------------ video model

    def video(self, seed: int, variant: str = "full") -> tuple[P.CoarseModel, float]:
        if (seed, variant) in self._video:
            return self._video[(seed, variant)]
        codec, _ = self.codec()
        r = self.recipe
        cfg = r.config("video", seed, **VIDEO_VARIANTS[variant])
        key = _key("video", to_dict(cfg), codec.content_hash(), r.video_train, r.data_seed)
        path = self._path(f"video{seed}-{variant}", key)
        model = P.new_coarse_model(cfg, video=True)
        cached = self._cached(path)
        if cached:
            model.load_state_dict(cached[1])
            seconds = cached[0]["seconds"]
        else:
            log.info("training video model %s, seed %d", variant, seed)
            t0 = time.perf_counter()
            model, _ = P.train_video_transformer(codec, self.video_train_set, cfg)
            seconds = time.perf_counter() - t0
            save_checkpoint(path, {"seconds": seconds}, model.state_dict())
        self._video[(seed, variant)] = (model.eval(), seconds)
        return self._video[(seed, variant)]

    def evaluate_video(self, seed: int = 0, variant: str = "full") -> dict:
        """Coarse video predictions from GT visible masks, plus coverage on fully hidden frames.

        A clip with an occlusion event counts as covered when every fully
        hidden frame has at least 25% of its GT amodal area predicted.
        """
        codec, _ = self.codec()
        model, seconds = self.video(seed, variant)
        cfg = self.recipe.config("video", seed, **VIDEO_VARIANTS[variant])
        data = self.video_test_set
        report = P.evaluate(P.Pipeline(codec, model, None, cfg), data, seed=seed, gt_visible=True, baselines=False)
        pred = report.pop("predictions").reshape(data.amodal.shape)
        events = np.flatnonzero(data.event.any(1))
        hidden = [[coverage(pred[i, t], data.amodal[i, t]) for t in np.flatnonzero(data.event[i])] for i in events]
        return {
            "miou_occ": report["model"]["miou_occ"],
            "miou_full": report["model"]["miou_full"],
            "event_samples": len(events),
            "covered_fraction": float(np.mean([min(c) >= 0.25 for c in hidden])) if hidden else float("nan"),
            "mean_hidden_coverage": float(np.mean([np.mean(c) for c in hidden])) if hidden else float("nan"),
            "train_seconds": seconds,
        }


def summarize(report: dict) -> dict:
    """The headline numbers of an `evaluate` report for the model and its baselines."""
    out = {}
    for name in ("model", "visible_copy", "convex_hull"):
        if name in report:
            out[name] = {k: round(float(report[name][k]), 4) for k in ("miou_occ", "miou_full", "AP", "AR") if k in report[name]}
    return out


def recipe_dict(recipe: DeskRecipe) -> dict:
    return asdict(recipe)


__all__ = ["DeskRecipe", "DeskExperiment", "IMAGE_VARIANTS", "VIDEO_VARIANTS", "coverage", "summarize"]
