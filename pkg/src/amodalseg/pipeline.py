"""Three-stage training (codec -> transformer -> refinement), inference and evaluation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from skimage.morphology import convex_hull_image

from . import metrics
from .backbone import ConvBackbone, crop_roi
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_hash
from .coarse_transformer import (
    MaskPredictTransformer,
    VideoMaskPredictTransformer,
    build_schedule,
    masked_nll_loss,
    sample_training_mask,
)
from .config import TrainConfig, from_dict, to_dict
from .datasets import CropSet, VideoCropSet
from .mask_vq import THRESHOLD, DivergenceError, LossBreakdown, MaskCodec, fit_vq, load_codec, save_codec
from .refinement import RefineNet, refine_loss
from .synth_data import augment_mask, bbox_of

log = logging.getLogger(__name__)

CODEC_FILE = "codec.ckpt"
TRANSFORMER_FILE = "transformer.ckpt"
REFINE_FILE = "refine.ckpt"
VIDEO_FILE = "video.ckpt"
VIDEO_REFINE_FILE = "video_refine.ckpt"


class PrerequisiteError(RuntimeError):
    pass


Callback = Callable[[int, dict], None]


def _seed_all(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def augment_batch(masks: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    out = masks.copy()
    for i in range(len(out)):
        if rng.random() < p:
            out[i] = augment_mask(out[i], rng)
    return out


@torch.no_grad()
def tokenize(codec: MaskCodec, masks: np.ndarray, batch: int = 512) -> torch.Tensor:
    flat = masks.reshape(-1, *masks.shape[-2:])
    out = torch.cat([codec.tokenize(torch.as_tensor(flat[i : i + batch])) for i in range(0, len(flat), batch)])
    return out.reshape(*masks.shape[:-2], *out.shape[-2:])


def set_learning_rate(opt: torch.optim.Optimizer, cfg: TrainConfig, step: int) -> None:
    """Apply the configured schedule for 1-based ``step``."""
    for group in opt.param_groups:
        group["lr"] = cfg.learning_rate * cfg.lr_multiplier(step - 1)


def _step(
    opt: torch.optim.Optimizer,
    losses: LossBreakdown,
    step: int,
    params,
    restore: Callable[[], None],
    cfg: TrainConfig,
) -> None:
    try:
        losses.check_finite(step)
    except DivergenceError:
        restore()
        raise
    opt.zero_grad(set_to_none=True)
    losses.total.backward()
    torch.nn.utils.clip_grad_norm_(params, 1.0)
    set_learning_rate(opt, cfg, step)
    opt.step()


def _log(history: list, cfg: TrainConfig, step: int, stage: str, losses: LossBreakdown, callback: Callback | None):
    if step % cfg.log_every == 0 or step == cfg.iterations:
        rec = {"stage": stage, "step": step, **losses.as_floats()}
        history.append(rec)
        log.debug("%s", rec)
        if callback:
            callback(step, rec)


# ------------------------------------------------------------------ image model

@dataclass
class CoarseModel:
    backbone: ConvBackbone
    transformer: MaskPredictTransformer | VideoMaskPredictTransformer

    def modules(self):
        return [self.backbone, self.transformer]

    def eval(self):
        for m in self.modules():
            m.eval()
        return self

    def state_dict(self) -> dict:
        out = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        out.update({f"transformer.{k}": v for k, v in self.transformer.state_dict().items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        self.backbone.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("backbone.")})
        self.transformer.load_state_dict({k[12:]: v for k, v in state.items() if k.startswith("transformer.")})

    def content_hash(self) -> str:
        return state_hash(self.state_dict())


def new_coarse_model(cfg: TrainConfig, video: bool = False) -> CoarseModel:
    n = cfg.codec.latent_size**2
    backbone = ConvBackbone(cfg.model.d, cfg.model.backbone_stages)
    if video:
        tr = VideoMaskPredictTransformer(
            cfg.codec.codebook_size, n, cfg.model, roll=not (cfg.no_roll or cfg.no_sttb), temporal=not cfg.no_sttb
        )
    else:
        tr = MaskPredictTransformer(cfg.codec.codebook_size, n, cfg.model)
    return CoarseModel(backbone, tr)


def train_codec(masks: np.ndarray, cfg: TrainConfig, callback: Callback | None = None):
    return fit_vq(masks, cfg, callback=callback)


def train_transformer(
    codec: MaskCodec,
    data: CropSet,
    cfg: TrainConfig,
    callback: Callback | None = None,
    model: CoarseModel | None = None,
) -> tuple[CoarseModel, list[dict]]:
    """Masked-token training of backbone + transformer with the codec frozen."""
    gen = _seed_all(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or new_coarse_model(cfg)
    codec.eval()
    targets = tokenize(codec, data.amodal)
    images = torch.as_tensor(data.images)
    params = [p for m in model.modules() for p in m.parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.01)
    good = copy.deepcopy(model.state_dict())
    history: list[dict] = []
    for m in model.modules():
        m.train()
    for step in range(1, cfg.iterations + 1):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        vis = data.visible[idx.numpy()]
        if cfg.augment_visible:
            vis = augment_batch(vis, rng)
        vis_tokens = tokenize(codec, vis)
        masked_tokens, masked = sample_training_mask(targets[idx], model.transformer.mask_id, cfg.masking, gen)
        logits = model.transformer(model.backbone(images[idx]), vis_tokens, masked_tokens)
        losses = masked_nll_loss(logits, targets[idx], masked)
        _step(opt, losses, step, params, lambda: model.load_state_dict(good), cfg)
        if step % cfg.checkpoint_every == 0:
            good = copy.deepcopy(model.state_dict())
        _log(history, cfg, step, "transformer", losses, callback)
    return model.eval(), history


def train_video_transformer(
    codec: MaskCodec,
    data: VideoCropSet,
    cfg: TrainConfig,
    callback: Callback | None = None,
) -> tuple[CoarseModel, list[dict]]:
    gen = _seed_all(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = new_coarse_model(cfg, video=True)
    codec.eval()
    targets = tokenize(codec, data.amodal)  # N T h w
    images = torch.as_tensor(data.images)
    params = [p for m in model.modules() for p in m.parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.01)
    good = copy.deepcopy(model.state_dict())
    history: list[dict] = []
    for m in model.modules():
        m.train()
    T = data.images.shape[1]
    for step in range(1, cfg.iterations + 1):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        vis = data.visible[idx.numpy()]
        if cfg.augment_visible:
            vis = augment_batch(vis.reshape(-1, *vis.shape[-2:]), rng).reshape(vis.shape)
        vis_tokens = tokenize(codec, vis)
        tgt = targets[idx]
        masked_tokens, masked = sample_training_mask(tgt.reshape(len(idx), -1), model.transformer.mask_id, cfg.masking, gen)
        masked_tokens = masked_tokens.reshape(tgt.shape)
        B = len(idx)
        feats = model.backbone(images[idx].flatten(0, 1))
        feats = feats.reshape(B, T, *feats.shape[1:])
        logits = model.transformer(feats, vis_tokens, masked_tokens)
        losses = masked_nll_loss(logits.reshape(B, -1, logits.shape[-1]), tgt.reshape(B, -1), masked)
        _step(opt, losses, step, params, lambda: model.load_state_dict(good), cfg)
        if step % cfg.checkpoint_every == 0:
            good = copy.deepcopy(model.state_dict())
        _log(history, cfg, step, "video", losses, callback)
    return model.eval(), history


# ------------------------------------------------------------------ coarse prediction

@torch.no_grad()
def coarse_predict(
    codec: MaskCodec,
    model: CoarseModel,
    images: np.ndarray,
    visible: np.ndarray,
    K: int = 3,
    gamma: str = "cosine",
    seed: int = 0,
    batch: int = 128,
    keep_trace: bool = False,
) -> dict:
    """Coarse amodal probabilities (``decode`` of the decoded tokens) and backbone features.

    Works for images ``(N, 3, S, S)`` and clips ``(N, T, 3, S, S)``.
    """
    model.eval()
    video = images.ndim == 5
    gen = torch.Generator().manual_seed(seed)
    feats_all, coarse_all, traces = [], [], []
    for i in range(0, len(images), batch):
        img = torch.as_tensor(images[i : i + batch])
        vis_tokens = tokenize(codec, visible[i : i + batch])
        B = img.shape[0]
        if video:
            T = img.shape[1]
            feats = model.backbone(img.flatten(0, 1))
            fv = feats.reshape(B, T, *feats.shape[1:])
            schedule = build_schedule(T * vis_tokens.shape[-1] * vis_tokens.shape[-2], K, gamma)
            tokens, trace = model.transformer.decode(fv, vis_tokens, schedule, gen)
            coarse = codec.decode(tokens.flatten(0, 1)).reshape(B, T, *images.shape[-2:])
            feats_all.append(fv)
        else:
            feats = model.backbone(img)
            schedule = build_schedule(vis_tokens.shape[-1] * vis_tokens.shape[-2], K, gamma)
            tokens, trace = model.transformer.decode(feats, vis_tokens, schedule, gen)
            coarse = codec.decode(tokens)
            feats_all.append(feats)
        coarse_all.append(coarse)
        if keep_trace:
            traces.append(trace)
    return {"feats": torch.cat(feats_all), "coarse": torch.cat(coarse_all), "traces": traces}


@torch.no_grad()
def decode_trace(codec: MaskCodec, trace: list[dict], shape: tuple[int, ...]) -> list[torch.Tensor]:
    """Per-step coarse masks: the decoded full prediction made at each step."""
    return [codec.decode(step["predicted"].reshape(shape)) for step in trace]


# ------------------------------------------------------------------ refinement

class RefineStage(torch.nn.Module):
    """Refinement net, plus its own image backbone when ``refine_backbone="finetune"``.

    Without an own backbone the stage consumes the (frozen) coarse-stage
    features; with one it recomputes features from the images.
    """

    def __init__(self, net: RefineNet, backbone: ConvBackbone | None = None):
        super().__init__()
        self.net = net
        self.backbone = backbone

    def features(self, shared_feats: torch.Tensor, images: torch.Tensor | None) -> torch.Tensor:
        if self.backbone is None:
            return shared_feats
        if images is None:
            raise ValueError("a refinement stage with its own backbone needs the input images")
        return self.backbone(images)

    def forward(self, shared_feats: torch.Tensor, coarse: torch.Tensor, images: torch.Tensor | None = None):
        return self.net(self.features(shared_feats, images), coarse)


def new_refine(cfg: TrainConfig) -> RefineStage:
    net = RefineNet(
        cfg.model.d,
        cfg.codec.factor,
        attention=not cfg.no_attention,
        two_branch=not cfg.single_branch,
    )
    own = ConvBackbone(cfg.model.d, cfg.model.backbone_stages) if cfg.refine_backbone == "finetune" else None
    return RefineStage(net, own)


def _frames(x: np.ndarray | torch.Tensor, tail: int) -> torch.Tensor:
    x = torch.as_tensor(x)
    return x.reshape(-1, *x.shape[-tail:])


def train_refine(
    codec: MaskCodec,
    model: CoarseModel,
    data: CropSet | VideoCropSet,
    cfg: TrainConfig,
    callback: Callback | None = None,
    coarse: dict | None = None,
) -> tuple[RefineStage, list[dict]]:
    """Train the refinement stage with codec and coarse model frozen.

    Coarse masks come from running the full iterative decoder once over
    the training set. With ``refine_backbone="finetune"`` the stage trains
    a copy of the coarse backbone alongside the net; the shared backbone
    itself is never updated. Video clips are refined frame by frame.
    """
    if cfg.no_refine:
        raise ValueError("no_refine is set; there is nothing to train")
    coarse = coarse or coarse_predict(codec, model, data.images, data.visible, cfg.K, cfg.gamma, seed=cfg.seed)
    feats = _frames(coarse["feats"], 3)
    cm = _frames(coarse["coarse"], 2)
    images = _frames(data.images, 3)
    amo = _frames(data.amodal, 2)
    vis = _frames(data.visible, 2)
    gen = _seed_all(cfg.seed)
    stage = new_refine(cfg)
    if stage.backbone is not None:
        stage.backbone.load_state_dict(model.backbone.state_dict())
    stage.train()
    params = list(stage.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=0.01)
    good = copy.deepcopy(stage.state_dict())
    history: list[dict] = []
    for step in range(1, cfg.iterations + 1):
        idx = torch.randint(len(cm), (cfg.batch_size,), generator=gen)
        out = stage(feats[idx], cm[idx], images[idx])
        losses = refine_loss(out, amo[idx], vis[idx])
        _step(opt, losses, step, params, lambda: stage.load_state_dict(good), cfg)
        if step % cfg.checkpoint_every == 0:
            good = copy.deepcopy(stage.state_dict())
        _log(history, cfg, step, "refine", losses, callback)
    stage.eval()
    return stage, history


# ------------------------------------------------------------------ full pipeline

@dataclass
class Pipeline:
    codec: MaskCodec
    coarse: CoarseModel
    refine: RefineStage | None = None
    cfg: TrainConfig = field(default_factory=TrainConfig)

    @property
    def video(self) -> bool:
        return isinstance(self.coarse.transformer, VideoMaskPredictTransformer)

    @torch.no_grad()
    def predict(
        self,
        images: np.ndarray,
        visible: np.ndarray,
        K: int | None = None,
        seed: int = 0,
        keep_trace: bool = False,
        force_contain: bool = False,
    ) -> dict:
        """Amodal probabilities for a batch of crops (or clips of crops).

        Returns ``amodal`` (final), ``coarse``, ``attention`` (or None) and
        optionally the decode ``traces``.
        """
        K = K or self.cfg.K
        out = coarse_predict(self.codec, self.coarse, images, visible, K, self.cfg.gamma, seed, keep_trace=keep_trace)
        coarse = out["coarse"]
        amodal, attention = coarse, None
        if self.refine is not None:
            res = self.refine(_frames(out["feats"], 3), _frames(coarse, 2), _frames(images, 3))
            amodal = res.amodal.reshape(coarse.shape)
            attention = res.attention
        if force_contain:
            amodal = torch.maximum(amodal, torch.as_tensor(visible, dtype=amodal.dtype))
        return {"amodal": amodal, "coarse": coarse, "attention": attention, "traces": out["traces"]}


def mask_scores(probs: torch.Tensor) -> np.ndarray:
    """Confidence of each predicted mask: mean probability over its foreground."""
    flat = probs.flatten(1)
    fg = flat >= THRESHOLD
    s = (flat * fg).sum(1) / fg.sum(1).clamp(min=1)
    return s.numpy()


def convex_hull_baseline(visible: np.ndarray) -> np.ndarray:
    out = np.zeros_like(visible, dtype=bool)
    for i, v in enumerate(visible.reshape(-1, *visible.shape[-2:])):
        if v.sum() >= 3:
            try:
                out.reshape(-1, *visible.shape[-2:])[i] = convex_hull_image(v) | v
                continue
            except ValueError:  # collinear pixels
                pass
        out.reshape(-1, *visible.shape[-2:])[i] = v
    return out


def noisy_visible(visible: np.ndarray, seed: int) -> np.ndarray:
    """Deterministically perturbed visible masks emulating detector output."""
    rng = np.random.default_rng([seed, 7919])
    flat = visible.reshape(-1, *visible.shape[-2:])
    return np.stack([augment_mask(v, rng) for v in flat]).reshape(visible.shape)


def evaluate(
    pipe: Pipeline,
    data: CropSet | VideoCropSet,
    K: int | None = None,
    seed: int = 0,
    gt_visible: bool | None = None,
    occlusion_window: tuple[float, float] | None = None,
    baselines: bool = True,
    use_refine: bool = True,
) -> dict:
    """Run the pipeline over a crop set and report model and baseline metrics.

    Masks fed to the model are the GT visible masks when ``gt_visible`` is
    true, otherwise a fixed perturbation of them. Metrics always subtract
    the GT visible mask for mIoU_occ.
    """
    if len(data) == 0:
        raise ValueError("empty evaluation dataset")
    gt_visible = pipe.cfg.gt_visible if gt_visible is None else gt_visible
    vis_in = data.visible if gt_visible else noisy_visible(data.visible, seed)
    saved = pipe.refine
    if not use_refine:
        pipe.refine = None
    try:
        out = pipe.predict(data.images, vis_in, K=K, seed=seed)
    finally:
        pipe.refine = saved
    probs = out["amodal"].reshape(-1, *data.amodal.shape[-2:])
    pred = (probs >= THRESHOLD).numpy()
    vis = data.visible.reshape(-1, *data.visible.shape[-2:])
    amo = data.amodal.reshape(-1, *data.amodal.shape[-2:])
    occ = data.occlusion.reshape(-1)
    report = {
        "model": metrics.evaluation_report(list(pred), list(vis), list(amo), occ, mask_scores(probs), occlusion_window),
        "K": K or pipe.cfg.K,
        "gt_visible": gt_visible,
    }
    if baselines:
        vin = vis_in.reshape(-1, *vis.shape[-2:])
        report["visible_copy"] = metrics.evaluation_report(list(vin), list(vis), list(amo), occ, None, occlusion_window)
        hull = convex_hull_baseline(vin)
        report["convex_hull"] = metrics.evaluation_report(list(hull), list(vis), list(amo), occ, None, occlusion_window)
    report["predictions"] = pred
    return report


# ------------------------------------------------------------------ checkpoints

def save_stage(path: Path, kind: str, state: dict, cfg: TrainConfig, codec_hash: str, extra: dict | None = None) -> str:
    digest = state_hash(state)
    header = {"kind": kind, "codec_hash": codec_hash, "content_hash": digest, "config": to_dict(cfg), **(extra or {})}
    save_checkpoint(path, header, state)
    return digest


def save_pipeline(pipe: Pipeline, directory: str | Path, video: bool = False) -> None:
    directory = Path(directory)
    codec_hash = save_codec(pipe.codec, directory / CODEC_FILE)
    coarse_hash = save_stage(
        directory / (VIDEO_FILE if video else TRANSFORMER_FILE),
        "video" if video else "transformer",
        pipe.coarse.state_dict(),
        pipe.cfg,
        codec_hash,
    )
    if pipe.refine is not None:
        save_stage(
            directory / (VIDEO_REFINE_FILE if video else REFINE_FILE),
            "refine",
            pipe.refine.state_dict(),
            pipe.cfg,
            codec_hash,
            {"coarse_hash": coarse_hash},
        )


def _load_stage(path: Path, kind: str, codec_hash: str) -> tuple[dict, dict]:
    if not path.exists():
        raise PrerequisiteError(f"missing {kind} checkpoint {path}")
    header, state = load_checkpoint(path)
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected {kind!r}, found {header.get('kind')!r}")
    if header.get("codec_hash") != codec_hash:
        raise CheckpointError(f"{path}: trained against codec {header.get('codec_hash')}, loaded codec is {codec_hash}")
    return header, state


def load_codec_from(directory: str | Path) -> MaskCodec:
    path = Path(directory) / CODEC_FILE
    if not path.exists():
        raise PrerequisiteError(f"missing codec checkpoint {path}")
    return load_codec(path)


def load_coarse(directory: str | Path, codec: MaskCodec, video: bool = False) -> tuple[CoarseModel, TrainConfig, str]:
    path = Path(directory) / (VIDEO_FILE if video else TRANSFORMER_FILE)
    header, state = _load_stage(path, "video" if video else "transformer", codec.content_hash())
    cfg = from_dict(header["config"])
    model = new_coarse_model(cfg, video=video)
    model.load_state_dict(state)
    return model.eval(), cfg, header["content_hash"]


def load_pipeline(directory: str | Path, video: bool = False, require_refine: bool = True) -> Pipeline:
    directory = Path(directory)
    codec = load_codec_from(directory)
    coarse, cfg, coarse_hash = load_coarse(directory, codec, video)
    refine = None
    rpath = directory / (VIDEO_REFINE_FILE if video else REFINE_FILE)
    if rpath.exists() or require_refine:
        header, state = _load_stage(rpath, "refine", codec.content_hash())
        if header.get("coarse_hash") != coarse_hash:
            raise CheckpointError(f"{rpath}: refinement was trained on a different transformer checkpoint")
        rcfg = from_dict(header["config"])
        refine = new_refine(rcfg)
        refine.load_state_dict(state)
        refine.eval()
        cfg = rcfg
    return Pipeline(codec, coarse, refine, cfg)


# ------------------------------------------------------------------ single-image inference

def infer(
    pipe: Pipeline,
    image: np.ndarray,
    visible_mask: np.ndarray,
    bbox=None,
    K: int | None = None,
    seed: int = 0,
    force_contain: bool = False,
) -> dict:
    """Amodal mask for one object in a full image.

    Crops around the (2x enlarged) visible box, runs coarse-to-fine
    prediction, and pastes the crop-space result back onto the canvas.
    """
    size = pipe.codec.cfg.input_size
    bbox = bbox if bbox is not None else bbox_of(visible_mask)
    img, (vis,), (x0, y0, x1, y1) = crop_roi(image, [np.asarray(visible_mask, bool)], bbox, size)
    out = pipe.predict(img.transpose(2, 0, 1)[None], vis[None], K=K, seed=seed, keep_trace=True, force_contain=force_contain)
    crop_pred = out["amodal"][0].numpy() >= THRESHOLD
    full = np.zeros(image.shape[:2], bool)
    full[y0:y1, x0:x1] = resize_nearest_to(crop_pred, (y1 - y0, x1 - x0))
    if force_contain:
        full |= np.asarray(visible_mask, bool)  # resampling may drop thin visible parts
    return {
        "amodal": full,
        "crop_amodal": out["amodal"][0].numpy(),
        "crop_coarse": out["coarse"][0].numpy(),
        "crop_image": img,
        "crop_visible": vis,
        "window": (x0, y0, x1, y1),
        "attention": None if out["attention"] is None else out["attention"][0].numpy(),
        "trace": out["traces"][0] if out["traces"] else [],
    }


def resize_nearest_to(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * arr.shape[0] / shape[0]).astype(int), arr.shape[0] - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * arr.shape[1] / shape[1]).astype(int), arr.shape[1] - 1)
    return arr[rows][:, cols]


__all__ = [
    "Pipeline",
    "CoarseModel",
    "PrerequisiteError",
    "train_codec",
    "train_transformer",
    "train_video_transformer",
    "train_refine",
    "coarse_predict",
    "evaluate",
    "infer",
    "save_pipeline",
    "load_pipeline",
    "convex_hull_baseline",
    "noisy_visible",
]
