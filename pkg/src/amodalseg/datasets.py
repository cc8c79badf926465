"""Turn synthetic scenes into fixed-size ROI crops for training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import crop_roi
from .synth_data import (
    AmodalInstance,
    AnnotationError,
    Scene,
    SceneSpec,
    bbox_of,
    export_annotations,
    generate_scene,
    generate_video,
    import_annotations,
    occlusion_rate,
)


@dataclass
class CropSet:
    images: np.ndarray  # N x 3 x S x S float32
    visible: np.ndarray  # N x S x S bool
    amodal: np.ndarray  # N x S x S bool
    occlusion: np.ndarray  # N, measured inside the crop
    instances: list[AmodalInstance] = field(default_factory=list)  # canvas-space originals

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "CropSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CropSet(
            self.images[idx],
            self.visible[idx],
            self.amodal[idx],
            self.occlusion[idx],
            [self.instances[i] for i in idx] if self.instances else [],
        )

    def in_window(self, lo: float, hi: float) -> "CropSet":
        return self.subset(np.flatnonzero((self.occlusion >= lo) & (self.occlusion <= hi)))

    def occluded(self, min_rate: float) -> "CropSet":
        """Crops whose occlusion rate is at least ``min_rate`` (all crops for 0)."""
        return self.subset(np.flatnonzero(self.occlusion >= min_rate))


@dataclass
class VideoCropSet:
    images: np.ndarray  # N x T x 3 x S x S
    visible: np.ndarray  # N x T x S x S
    amodal: np.ndarray  # N x T x S x S
    occlusion: np.ndarray  # N x T
    event: np.ndarray  # N x T, target fully hidden in that frame

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "VideoCropSet":
        idx = np.asarray(idx, dtype=np.int64)
        return VideoCropSet(self.images[idx], self.visible[idx], self.amodal[idx], self.occlusion[idx], self.event[idx])


def crop_instance(image: np.ndarray, inst: AmodalInstance, size: int, window_bbox=None):
    bbox = window_bbox if window_bbox is not None else bbox_of(inst.visible)
    img, (vis, amo), _ = crop_roi(image, [inst.visible, inst.amodal], bbox, size)
    return img.transpose(2, 0, 1), vis, amo


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def build_image_set(
    n_scenes: int,
    seed: int,
    spec: SceneSpec | None = None,
    size: int = 32,
    min_visible: int = 8,
    max_occlusion: float = 0.9,
) -> CropSet:
    """Crop every sufficiently visible object of ``n_scenes`` random scenes.

    Each scene draws from its own RNG stream seeded by ``(seed, scene)``.
    """
    spec = spec or SceneSpec()
    imgs, vis, amo, occ, insts = [], [], [], [], []
    for s in range(n_scenes):
        scene = generate_scene(spec, _sample_rng(seed, s), image_id=f"s{seed}_{s}")
        for inst in scene.instances:
            if inst.visible.sum() < min_visible or inst.occlusion_rate > max_occlusion:
                continue
            img, v, a = crop_instance(scene.image, inst, size)
            if not a.any():
                continue
            imgs.append(img)
            vis.append(v)
            amo.append(a)
            occ.append(occlusion_rate(v, a))
            insts.append(inst)
    return CropSet(
        np.asarray(imgs, np.float32).reshape(-1, 3, size, size),
        np.asarray(vis, bool).reshape(-1, size, size),
        np.asarray(amo, bool).reshape(-1, size, size),
        np.asarray(occ, np.float64),
        insts,
    )


def _union_bbox(masks) -> tuple[int, int, int, int]:
    union = np.logical_or.reduce([np.asarray(m) for m in masks])
    return bbox_of(union)


def build_video_set(
    n_videos: int,
    seed: int,
    T: int = 4,
    spec: SceneSpec | None = None,
    size: int = 32,
    event_prob: float = 0.7,
    others_per_video: int = 1,
    min_visible: int = 8,
) -> VideoCropSet:
    """Crop tracked objects from random videos with one shared window per track.

    The window is the union of the object's visible boxes over all frames,
    enlarged 2x, so frames where the object is hidden stay aligned.
    """
    spec = spec or SceneSpec(n_objects=(4, 8), pan_max=1.0)
    imgs, vis, amo, occ, ev = [], [], [], [], []
    for v in range(n_videos):
        rng = _sample_rng(seed, v)
        event = bool(rng.random() < event_prob)
        scenes, samples = generate_video(spec, T, rng, video_id=f"v{seed}_{v}", occlusion_event=event)
        chosen = [s for s in samples if s.event_frames]
        others = [
            s for s in samples if not s.event_frames and max(int(f.visible.sum()) for f in s.frames) >= min_visible
        ]
        if others:
            pick = rng.permutation(len(others))[:others_per_video]
            chosen += [others[i] for i in pick]
        for sample in chosen:
            window = _union_bbox([f.visible for f in sample.frames])
            if window[2] == 0:
                continue
            fi, fv, fa = [], [], []
            for t, frame in enumerate(sample.frames):
                img, vm, am = crop_instance(scenes[t].image, frame, size, window_bbox=window)
                fi.append(img)
                fv.append(vm)
                fa.append(am)
            if not all(a.any() for a in fa):
                continue
            imgs.append(fi)
            vis.append(fv)
            amo.append(fa)
            occ.append([occlusion_rate(a, b) for a, b in zip(fv, fa)])
            ev.append([t in sample.event_frames for t in range(T)])
    return VideoCropSet(
        np.asarray(imgs, np.float32).reshape(-1, T, 3, size, size),
        np.asarray(vis, bool).reshape(-1, T, size, size),
        np.asarray(amo, bool).reshape(-1, T, size, size),
        np.asarray(occ, np.float64).reshape(-1, T),
        np.asarray(ev, bool).reshape(-1, T),
    )


# ---------------------------------------------------------------- on-disk datasets

ANNOTATION_FILE = "annotations.jsonl"
IMAGE_DIR = "images"


def write_scenes(directory: str | Path, scenes: list[Scene]) -> int:
    """Store scenes as ``images/<image_id>.png`` plus one annotation line per instance."""
    directory = Path(directory)
    (directory / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        image_id = scene.instances[0].image_id if scene.instances else None
        if image_id is None:
            continue
        pixels = (np.clip(scene.image, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(pixels).save(directory / IMAGE_DIR / f"{image_id}.png")
    return export_annotations((inst for sc in scenes for inst in sc.instances), directory / ANNOTATION_FILE)


def _read_images(directory: Path, image_ids) -> dict[str, np.ndarray]:
    out = {}
    for image_id in image_ids:
        path = directory / IMAGE_DIR / f"{image_id}.png"
        if not path.exists():
            raise AnnotationError(f"annotation refers to missing image {path}")
        out[image_id] = np.asarray(Image.open(path).convert("RGB"), np.float32) / 255.0
    return out


def load_crop_set(
    directory: str | Path,
    size: int = 32,
    min_visible: int = 8,
    max_occlusion: float = 0.9,
) -> CropSet:
    """Crop every annotated instance of a dataset directory (see `write_scenes`)."""
    directory = Path(directory)
    instances = import_annotations(directory / ANNOTATION_FILE)
    images = _read_images(directory, sorted({i.image_id for i in instances}))
    imgs, vis, amo, occ, kept = [], [], [], [], []
    for inst in instances:
        if inst.visible.sum() < min_visible or inst.occlusion_rate > max_occlusion:
            continue
        img, v, a = crop_instance(images[inst.image_id], inst, size)
        if not a.any():
            continue
        imgs.append(img)
        vis.append(v)
        amo.append(a)
        occ.append(occlusion_rate(v, a))
        kept.append(inst)
    return CropSet(
        np.asarray(imgs, np.float32).reshape(-1, 3, size, size),
        np.asarray(vis, bool).reshape(-1, size, size),
        np.asarray(amo, bool).reshape(-1, size, size),
        np.asarray(occ, np.float64),
        kept,
    )


def load_video_set(directory: str | Path, size: int = 32, min_visible: int = 8) -> VideoCropSet:
    """Group annotated frames into tracks by ``(video_id, instance_id)`` and crop them.

    Tracks missing a frame are skipped; a frame counts as an occlusion
    event when its instance is marked fully occluded.
    """
    directory = Path(directory)
    instances = [i for i in import_annotations(directory / ANNOTATION_FILE) if i.video_id is not None]
    images = _read_images(directory, sorted({i.image_id for i in instances}))
    tracks: dict[tuple, dict[int, AmodalInstance]] = {}
    for inst in instances:
        tracks.setdefault((inst.video_id, inst.instance_id), {})[int(inst.frame_index)] = inst
    T = max((max(t) + 1 for t in tracks.values()), default=0)
    imgs, vis, amo, occ, ev = [], [], [], [], []
    for key in sorted(tracks):
        frames = tracks[key]
        if sorted(frames) != list(range(T)):
            continue
        seq = [frames[t] for t in range(T)]
        event = [f.fully_occluded for f in seq]
        if not any(event) and max(int(f.visible.sum()) for f in seq) < min_visible:
            continue
        window = _union_bbox([f.visible for f in seq])
        if window[2] == 0:
            continue
        crops = [crop_instance(images[f.image_id], f, size, window_bbox=window) for f in seq]
        if not all(c[2].any() for c in crops):
            continue
        imgs.append([c[0] for c in crops])
        vis.append([c[1] for c in crops])
        amo.append([c[2] for c in crops])
        occ.append([occlusion_rate(c[1], c[2]) for c in crops])
        ev.append(event)
    return VideoCropSet(
        np.asarray(imgs, np.float32).reshape(-1, T, 3, size, size),
        np.asarray(vis, bool).reshape(-1, T, size, size),
        np.asarray(amo, bool).reshape(-1, T, size, size),
        np.asarray(occ, np.float64).reshape(-1, T),
        np.asarray(ev, bool).reshape(-1, T),
    )
