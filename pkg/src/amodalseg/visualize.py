"""Panel images showing the coarse-to-fine progression for one instance.

Column order: input crop, visible mask, one column per decode step
(the full coarse mask decoded from that step's predictions), refined
amodal mask, ground-truth amodal mask.

Colors are fixed:
  * visible pixels        -> ``VISIBLE_COLOR`` (blue)
  * predicted/GT amodal   -> ``AMODAL_COLOR`` (orange) where not visible
  * background            -> ``BACKGROUND`` (near black)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

BACKGROUND = (20, 20, 20)
VISIBLE_COLOR = (66, 135, 245)
AMODAL_COLOR = (245, 150, 40)
SEPARATOR = (255, 255, 255)


def colorize(mask: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    """RGB uint8 rendering of a mask; visible pixels take the visible color."""
    mask = np.asarray(mask, bool)
    out = np.empty((*mask.shape, 3), np.uint8)
    out[:] = BACKGROUND
    out[mask] = AMODAL_COLOR
    if visible is not None:
        out[mask & np.asarray(visible, bool)] = VISIBLE_COLOR
    return out


def _image_tile(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, np.float32)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def panel_columns(image, visible, coarse_steps, refined, gt_amodal) -> list[tuple[str, np.ndarray]]:
    visible = np.asarray(visible, bool)
    cols = [("image", _image_tile(image)), ("visible", colorize(visible, visible))]
    for k, step in enumerate(coarse_steps, start=1):
        cols.append((f"step {k}", colorize(np.asarray(step) >= 0.5, visible)))
    cols.append(("refined", colorize(np.asarray(refined) >= 0.5, visible)))
    cols.append(("gt", colorize(gt_amodal, visible)))
    return cols


def render_panel(image, visible, coarse_steps, refined, gt_amodal, scale: int = 4, label: bool = True) -> Image.Image:
    cols = panel_columns(image, visible, coarse_steps, refined, gt_amodal)
    h, w = cols[0][1].shape[:2]
    H, W = h * scale, w * scale
    top = 12 if label else 0
    gap = 2
    canvas = Image.new("RGB", (len(cols) * (W + gap) - gap, H + top), SEPARATOR)
    draw = ImageDraw.Draw(canvas)
    for i, (name, tile) in enumerate(cols):
        x = i * (W + gap)
        canvas.paste(Image.fromarray(tile).resize((W, H), Image.NEAREST), (x, top))
        if label:
            draw.text((x + 2, 0), name, fill=(0, 0, 0))
    return canvas


def save_panel(path: str | Path, *args, **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    render_panel(*args, **kw).save(path)
    return path
