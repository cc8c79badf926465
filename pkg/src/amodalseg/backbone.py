"""ROI cropping, the convolutional image encoder, and token embeddings."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def enlarged_window(bbox, height: int, width: int, scale: float = 2.0) -> tuple[int, int, int, int]:
    """Scale an ``(x, y, w, h)`` box about its centre and clamp; returns ``(x0, y0, x1, y1)``."""
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"empty bbox {tuple(bbox)}")
    cx, cy = x + w / 2.0, y + h / 2.0
    hw, hh = w * scale / 2.0, h * scale / 2.0
    x0 = max(0, math.floor(cx - hw))
    y0 = max(0, math.floor(cy - hh))
    x1 = min(width, math.ceil(cx + hw))
    y1 = min(height, math.ceil(cy + hh))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"bbox {tuple(bbox)} lies outside the {height}x{width} image")
    return x0, y0, x1, y1


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    return np.minimum(((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(int), n_src - 1)


def resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    rows = _nearest_index(arr.shape[0], size)
    cols = _nearest_index(arr.shape[1], size)
    return arr[rows][:, cols]


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def crop_roi(
    image: np.ndarray,
    masks: list[np.ndarray],
    bbox,
    size: int,
    scale: float = 2.0,
    image_mode: str = "bilinear",
) -> tuple[np.ndarray, list[np.ndarray], tuple[int, int, int, int]]:
    """Crop image and masks with the same enlarged window, then resize to ``size``.

    Masks use nearest-neighbour resampling so they stay binary and keep
    containment relations. Returns the window as ``(x0, y0, x1, y1)``.
    """
    H, W = image.shape[:2]
    x0, y0, x1, y1 = enlarged_window(bbox, H, W, scale)
    img = image[y0:y1, x0:x1]
    img = resize_bilinear(img, size) if image_mode == "bilinear" else resize_nearest(img, size)
    out_masks = [resize_nearest(m[y0:y1, x0:x1], size) for m in masks]
    return img, out_masks, (x0, y0, x1, y1)


def flatten_grid(x: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major."""
    return x.flatten(2).transpose(1, 2)


def unflatten_grid(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, h*w, C) -> (B, C, h, w)."""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w)


class ConvBackbone(nn.Module):
    """Small strided conv encoder standing in for a pretrained ResNet.

    Each stage halves the resolution; ``stages`` must equal log2 of the
    codec's downsampling factor so features align with latent tokens.
    """

    def __init__(self, d: int = 64, stages: int = 2, in_channels: int = 3, width: int = 32):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_channels, width, 3, padding=1), nn.GroupNorm(8, width), nn.GELU()]
        ch = width
        for i in range(stages):
            out = d if i == stages - 1 else width * 2
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.GroupNorm(8, out), nn.GELU()]
            ch = out
        layers += [nn.Conv2d(ch, d, 3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.d = d
        self.stride = 2**stages

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] % self.stride or image.shape[-2] % self.stride:
            raise ValueError(f"image size {tuple(image.shape[-2:])} not divisible by stride {self.stride}")
        return self.net(image)


class TokenEmbedding(nn.Module):
    """Learned embeddings for codebook indices plus the [MASK] sentinel.

    Index ``codebook_size`` is the sentinel. Learned spatial positions are
    added; the sequence is the row-major flattening of the grid.
    """

    def __init__(self, codebook_size: int, d: int, n_positions: int):
        super().__init__()
        self.codebook_size = codebook_size
        self.tokens = nn.Embedding(codebook_size + 1, d)
        self.pos = nn.Parameter(torch.zeros(n_positions, d))
        nn.init.normal_(self.tokens.weight, std=0.02)
        nn.init.normal_(self.pos, std=0.02)

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def forward(self, tokens: torch.Tensor, add_position: bool = True) -> torch.Tensor:
        flat = tokens.flatten(-2) if tokens.dim() >= 3 else tokens
        if flat.numel() and (flat.min() < 0 or flat.max() > self.codebook_size):
            raise ValueError(f"token index out of range [0, {self.codebook_size}]")
        out = self.tokens(flat)
        if add_position:
            if flat.shape[-1] != self.pos.shape[0]:
                raise ValueError(f"expected {self.pos.shape[0]} positions, got {flat.shape[-1]}")
            out = out + self.pos
        return out
