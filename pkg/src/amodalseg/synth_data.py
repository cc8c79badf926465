"""Synthetic 2-D amodal scenes with exact visible/amodal ground truth.

Shapes are rasterised at pixel centres and composited far-to-near; an
object's visible mask is its full raster minus the union of every
strictly nearer raster. Videos move objects with per-object velocities
plus a global camera pan, and can stage an "occlusion event" in which a
large occluder sweeps over one target and hides it completely in a
middle frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy import ndimage

SHAPE_KINDS = ("ellipse", "rectangle", "triangle", "capsule", "star")


class AnnotationError(ValueError):
    """Raised for malformed annotation records; names the offending record."""


@dataclass
class AmodalInstance:
    image_id: str
    bbox: tuple[int, int, int, int]  # amodal box, x, y, w, h
    visible: np.ndarray
    amodal: np.ndarray
    category: str
    occlusion_rate: float
    instance_id: int = 0
    fully_occluded: bool = False
    frame_index: int | None = None
    video_id: str | None = None

    def validate(self) -> None:
        if self.visible.shape != self.amodal.shape:
            raise AnnotationError(f"{self.image_id}: visible/amodal shape mismatch")
        if not self.amodal.any():
            raise AnnotationError(f"{self.image_id}: empty amodal mask")
        if (self.visible & ~self.amodal).any():
            raise AnnotationError(f"{self.image_id}: visible mask not contained in amodal mask")
        if self.occlusion_rate != occlusion_rate(self.visible, self.amodal):
            raise AnnotationError(f"{self.image_id}: stored occlusion_rate disagrees with masks")
        if self.fully_occluded != (not self.visible.any()):
            raise AnnotationError(f"{self.image_id}: fully_occluded flag disagrees with masks")


@dataclass
class VideoSample:
    video_id: str
    instance_id: int
    frames: list[AmodalInstance]
    event_frames: list[int] = field(default_factory=list)  # frames where the target is fully hidden

    @property
    def T(self) -> int:
        return len(self.frames)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_objects: tuple[int, int] = (10, 20)
    radius: tuple[float, float] = (5.0, 13.0)
    kinds: tuple[str, ...] = SHAPE_KINDS
    min_area: int = 6
    noise_std: float = 0.03
    velocity_max: float = 0.0  # px / frame per object
    pan_max: float = 1.0  # px / frame, shared by every object

    def validate(self) -> None:
        lo, hi = self.n_objects
        if not 1 <= lo <= hi:
            raise ValueError(f"bad object count range {self.n_objects}")
        if unknown := set(self.kinds) - set(SHAPE_KINDS):
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")


@dataclass
class Shape:
    kind: str
    cx: float
    cy: float
    radius: float
    aspect: float
    angle: float
    color: np.ndarray

    def moved(self, dx: float, dy: float) -> "Shape":
        return Shape(self.kind, self.cx + dx, self.cy + dy, self.radius, self.aspect, self.angle, self.color)


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    instances: list[AmodalInstance]
    depth_order: np.ndarray  # depth_order[i] = rank of object i, 0 is nearest
    shapes: list[Shape]


def occlusion_rate(visible: np.ndarray, amodal: np.ndarray) -> float:
    area = int(amodal.sum())
    if area == 0:
        raise ValueError("occlusion rate undefined for an empty amodal mask")
    return 1.0 - int(visible.sum()) / area


def _polygon(shape: Shape, n: int, inner: float | None) -> np.ndarray:
    pts = []
    steps = n * 2 if inner is not None else n
    for k in range(steps):
        r = shape.radius if (inner is None or k % 2 == 0) else shape.radius * inner
        theta = math.pi / 2 + 2 * math.pi * k / steps
        u, v = r * math.cos(theta), r * math.sin(theta) * shape.aspect
        pts.append(
            (
                shape.cx + u * math.cos(shape.angle) - v * math.sin(shape.angle),
                shape.cy + u * math.sin(shape.angle) + v * math.cos(shape.angle),
            )
        )
    return np.asarray(pts)


def rasterize(shape: Shape, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    if shape.kind in ("triangle", "star"):
        poly = _polygon(shape, 3 if shape.kind == "triangle" else 5, None if shape.kind == "triangle" else 0.45)
        inside = PolyPath(poly).contains_points(np.stack([px.ravel(), py.ravel()], axis=1))
        return inside.reshape(height, width)
    dx, dy = px - shape.cx, py - shape.cy
    c, s = math.cos(shape.angle), math.sin(shape.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    a, b = shape.radius, shape.radius * shape.aspect
    if shape.kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape.kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if shape.kind == "capsule":
        r = 0.5 * b
        half = max(a - r, 0.0)
        du = np.maximum(np.abs(u) - half, 0.0)
        return du**2 + v**2 <= r**2
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _sample_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    while True:
        color = rng.uniform(0.05, 0.95, size=3)
        if np.abs(color - background).max() > 0.25:
            return color.astype(np.float32)


def _sample_shape(spec: SceneSpec, rng: np.random.Generator, background: np.ndarray) -> Shape:
    kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
    return Shape(
        kind=kind,
        cx=float(rng.uniform(0, spec.width)),
        cy=float(rng.uniform(0, spec.height)),
        radius=float(rng.uniform(*spec.radius)),
        aspect=float(rng.uniform(0.45, 1.0)),
        angle=float(rng.uniform(0, math.pi)),
        color=_sample_color(rng, background),
    )


def bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def compose(
    shapes: Sequence[Shape],
    depth_order: np.ndarray,
    spec: SceneSpec,
    rng: np.random.Generator,
    background: np.ndarray,
    image_id: str,
    frame_index: int | None = None,
    video_id: str | None = None,
) -> Scene:
    """Render `shapes` and derive exact masks. `depth_order[i]` is object i's rank, 0 nearest."""
    H, W = spec.height, spec.width
    rasters = [rasterize(s, H, W) for s in shapes]
    image = np.empty((H, W, 3), np.float32)
    image[:] = background
    covered = np.zeros((H, W), bool)
    visible: list[np.ndarray] = [None] * len(shapes)  # type: ignore[list-item]
    for i in np.argsort(depth_order):  # nearest first
        visible[i] = rasters[i] & ~covered
        covered |= rasters[i]
        image[visible[i]] = shapes[i].color
    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)

    instances = []
    for i, (shape, full, vis) in enumerate(zip(shapes, rasters, visible)):
        if not full.any():
            continue  # moved entirely off-canvas in this frame
        instances.append(
            AmodalInstance(
                image_id=image_id,
                bbox=bbox_of(full),
                visible=vis,
                amodal=full,
                category=shape.kind,
                occlusion_rate=occlusion_rate(vis, full),
                instance_id=i,
                fully_occluded=not vis.any(),
                frame_index=frame_index,
                video_id=video_id,
            )
        )
    return Scene(image=image, instances=instances, depth_order=np.asarray(depth_order), shapes=list(shapes))


def _sample_shapes(spec: SceneSpec, rng: np.random.Generator, background: np.ndarray) -> list[Shape]:
    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    shapes = []
    while len(shapes) < n:
        shape = _sample_shape(spec, rng, background)
        if rasterize(shape, spec.height, spec.width).sum() < spec.min_area:
            continue  # degenerate after clipping, resample
        shapes.append(shape)
    return shapes


def generate_scene(spec: SceneSpec, rng: np.random.Generator, image_id: str = "img") -> Scene:
    spec.validate()
    background = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    shapes = _sample_shapes(spec, rng, background)
    depth = rng.permutation(len(shapes))
    return compose(shapes, depth, spec, rng, background, image_id)


def _add_occlusion_event(
    shapes: list[Shape],
    depth: np.ndarray,
    spec: SceneSpec,
    T: int,
    rng: np.random.Generator,
    background: np.ndarray,
) -> tuple[list[Shape], np.ndarray, list[np.ndarray], int, int]:
    """Append a nearest-depth disk that fully hides one target at a middle frame."""
    target = int(rng.integers(len(shapes)))
    t_mid = int(rng.integers(1, T - 1)) if T > 2 else 1
    tgt = shapes[target]
    # rectangle corners sit furthest from the centre
    reach = tgt.radius * (math.hypot(1.0, tgt.aspect) if tgt.kind == "rectangle" else 1.0) + 1.5
    occ_r = reach + float(rng.uniform(0.5, 2.0))
    speed = occ_r * float(rng.uniform(0.8, 1.2))
    theta = float(rng.uniform(0, 2 * math.pi))
    step = np.array([math.cos(theta), math.sin(theta)]) * speed
    occluder = Shape("ellipse", tgt.cx, tgt.cy, occ_r, 1.0, 0.0, _sample_color(rng, background))
    shapes = shapes + [occluder]
    depth = np.concatenate([depth + 1, [0]])
    return shapes, depth, step, target, t_mid


def generate_video(
    spec: SceneSpec,
    T: int,
    rng: np.random.Generator,
    video_id: str = "vid",
    occlusion_event: bool = False,
) -> tuple[list[Scene], list[VideoSample]]:
    """Render T frames and return per-frame scenes plus one tracked sample per object.

    With `occlusion_event`, one extra nearest object (a disk) is centred on a
    random target at a middle frame and slides past it; the target's sample
    records that frame in `event_frames`.
    """
    if T < 2:
        raise ValueError("a video needs at least 2 frames")
    spec.validate()
    background = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    shapes = _sample_shapes(spec, rng, background)
    depth = rng.permutation(len(shapes))
    n_base = len(shapes)
    velocity = rng.uniform(-spec.velocity_max, spec.velocity_max, size=(n_base, 2)) if spec.velocity_max > 0 else np.zeros((n_base, 2))
    pan = rng.uniform(-spec.pan_max, spec.pan_max, size=2) if spec.pan_max > 0 else np.zeros(2)
    target, t_mid = -1, -1
    if occlusion_event:
        shapes, depth, step, target, t_mid = _add_occlusion_event(shapes, depth, spec, T, rng, background)
        # the occluder is centred on the target at t_mid, so it shares the target's motion there
        velocity = np.concatenate([velocity, (velocity[target] + step)[None]])
        offset = -(t_mid * (velocity[-1] - velocity[target]))
        shapes[-1] = shapes[-1].moved(*offset)

    scenes = []
    for t in range(T):
        moved = [s.moved(*(t * (velocity[i] + pan))) for i, s in enumerate(shapes)]
        scenes.append(compose(moved, depth, spec, rng, background, f"{video_id}_f{t}", frame_index=t, video_id=video_id))

    samples = []
    for i in range(len(shapes)):
        frames = [next((inst for inst in sc.instances if inst.instance_id == i), None) for sc in scenes]
        if any(f is None for f in frames):
            continue  # left the canvas in some frame
        event = [t for t, f in enumerate(frames) if f.fully_occluded] if i == target else []
        samples.append(VideoSample(video_id=video_id, instance_id=i, frames=frames, event_frames=event))
    return scenes, samples


# ---------------------------------------------------------------- augmentation

def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, bool), structure=np.ones((k, k), bool))


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    return ndimage.binary_erosion(np.asarray(mask, bool), structure=np.ones((k, k), bool), border_value=0)


def blur_threshold(mask: np.ndarray, k: int) -> np.ndarray:
    blurred = ndimage.gaussian_filter(np.asarray(mask, np.float32), sigma=k / 3.0, mode="constant")
    return blurred >= 0.5


MASK_AUGMENTATIONS = (dilate, erode, blur_threshold)


def augment_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomly dilate, erode, or blur-then-threshold with a 3 or 5 kernel."""
    mask = np.asarray(mask, bool)
    op = MASK_AUGMENTATIONS[int(rng.integers(3))]
    k = int(rng.choice([3, 5]))
    if not mask.any():
        return mask.copy()
    return op(mask, k)


# ---------------------------------------------------------------- annotations

def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed row-major run-length code as ``[value, start, length]`` triples."""
    flat = np.asarray(mask, bool).ravel()
    if flat.size == 0:
        return {"size": list(mask.shape), "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    runs = [[int(flat[s]), int(s), int(e - s)] for s, e in zip(starts, ends)]
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "runs": runs}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, bool)
    pos = 0
    for value, start, length in rle["runs"]:
        if start != pos or length <= 0 or value not in (0, 1):
            raise ValueError(f"malformed run {[value, start, length]}")
        flat[start : start + length] = bool(value)
        pos = start + length
    if pos != h * w:
        raise ValueError(f"runs cover {pos} of {h * w} pixels")
    return flat.reshape(h, w)


def instance_to_record(inst: AmodalInstance) -> dict:
    rec = {
        "image_id": inst.image_id,
        "instance_id": inst.instance_id,
        "category": inst.category,
        "bbox": list(inst.bbox),
        "occlusion_rate": inst.occlusion_rate,
        "fully_occluded": inst.fully_occluded,
        "visible_mask": rle_encode(inst.visible),
        "amodal_mask": rle_encode(inst.amodal),
    }
    if inst.video_id is not None:
        rec["video_id"] = inst.video_id
    if inst.frame_index is not None:
        rec["frame_index"] = inst.frame_index
    return rec


_REQUIRED = ("image_id", "category", "bbox", "occlusion_rate", "visible_mask", "amodal_mask")


def record_to_instance(rec: dict, index: int = 0) -> AmodalInstance:
    for key in _REQUIRED:
        if key not in rec:
            raise AnnotationError(f"record {index}: missing field {key!r}")
    try:
        masks = {}
        for key in ("visible_mask", "amodal_mask"):
            ref = rec[key]
            if isinstance(ref, str):
                from PIL import Image

                masks[key] = np.asarray(Image.open(ref)) > 0
            else:
                masks[key] = rle_decode(ref)
        inst = AmodalInstance(
            image_id=str(rec["image_id"]),
            bbox=tuple(int(v) for v in rec["bbox"]),  # type: ignore[arg-type]
            visible=masks["visible_mask"],
            amodal=masks["amodal_mask"],
            category=str(rec["category"]),
            occlusion_rate=float(rec["occlusion_rate"]),
            instance_id=int(rec.get("instance_id", 0)),
            fully_occluded=bool(rec.get("fully_occluded", not masks["visible_mask"].any())),
            frame_index=rec.get("frame_index"),
            video_id=rec.get("video_id"),
        )
        if len(inst.bbox) != 4:
            raise AnnotationError("bbox must have 4 entries")
        inst.validate()
    except (AnnotationError, ValueError, TypeError, KeyError) as exc:
        raise AnnotationError(f"record {index}: {exc}") from exc
    return inst


def export_annotations(instances: Iterable[AmodalInstance], path: str | Path) -> int:
    """Write one JSON record per line. Returns the record count."""
    n = 0
    with open(path, "w") as fh:
        for inst in instances:
            inst.validate()
            fh.write(json.dumps(instance_to_record(inst)) + "\n")
            n += 1
    return n


def import_annotations(path: str | Path) -> list[AmodalInstance]:
    out = []
    with open(path) as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"record {index}: invalid JSON ({exc.msg})") from exc
            out.append(record_to_instance(rec, index))
    return out
