"""Convolutional refinement of coarse amodal masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .mask_vq import LossBreakdown


class DataIntegrityError(ValueError):
    pass


@dataclass
class RefineOutput:
    amodal_logits: torch.Tensor  # B x H x W
    visible_logits: torch.Tensor | None
    attention: torch.Tensor | None = None  # B x h x w weights

    @property
    def amodal(self) -> torch.Tensor:
        return torch.sigmoid(self.amodal_logits)

    @property
    def visible(self) -> torch.Tensor | None:
        return None if self.visible_logits is None else torch.sigmoid(self.visible_logits)


def downsample_mask(mask: torch.Tensor, size: tuple[int, int] | int) -> torch.Tensor:
    """Area-average a ``(B, H, W)`` soft mask down to ``size``."""
    if isinstance(size, int):
        size = (size, size)
    H, W = mask.shape[-2:]
    if H % size[0] or W % size[1]:
        raise ValueError(f"target {size} does not divide source {(H, W)}")
    x = mask[:, None] if mask.dim() == 3 else mask[None, None]
    out = F.avg_pool2d(x.to(torch.get_default_dtype()) if not x.is_floating_point() else x, (H // size[0], W // size[1]))
    return out[:, 0] if mask.dim() == 3 else out[0, 0]


def semantic_attention(m: torch.Tensor, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mask-pooled query attention over feature positions.

    ``m`` is ``(B, h, w)`` and ``feats`` ``(B, d, h, w)``. The query is the
    mask-weighted sum of features; each position's weight is the softmax of
    its scaled dot product with the query, and the output rescales every
    feature vector by its weight. Returns ``(A, weights)``.
    """
    B, d, h, w = feats.shape
    if m.shape != (B, h, w):
        raise ValueError(f"mask {tuple(m.shape)} does not match features {(B, h, w)}")
    v = feats.flatten(2)  # B d n
    q = torch.einsum("bn,bdn->bd", m.flatten(1).to(v.dtype), v)
    scores = torch.einsum("bd,bdn->bn", q, v) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)
    A = (v * weights[:, None, :]).reshape(B, d, h, w)
    return A, weights.reshape(B, h, w)


class RefineNet(nn.Module):
    """Decoder over ``concat(features, attended features, downsampled coarse mask)``.

    One shared trunk upsamples to full resolution; two 3x3 heads emit the
    amodal and visible logits. ``attention=False`` drops the attended
    features from the input; ``two_branch=False`` drops the visible head.
    """

    def __init__(self, d: int = 64, factor: int = 4, width: int = 64, attention: bool = True, two_branch: bool = True):
        super().__init__()
        self.factor = factor
        self.attention = attention
        self.two_branch = two_branch
        in_ch = d + (d if attention else 0) + 1
        trunk: list[nn.Module] = [
            nn.Conv2d(in_ch, width, 3, padding=1),
            nn.GroupNorm(8, width),
            nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.GELU(),
        ]
        ch = width
        for _ in range(int(math.log2(factor))):
            out = max(ch // 2, 16)
            trunk += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False), nn.Conv2d(ch, out, 3, padding=1), nn.GELU()]
            ch = out
        self.trunk = nn.Sequential(*trunk)
        self.amodal_head = nn.Conv2d(ch, 1, 3, padding=1)
        self.visible_head = nn.Conv2d(ch, 1, 3, padding=1) if two_branch else None

    def forward(self, feats: torch.Tensor, coarse: torch.Tensor) -> RefineOutput:
        """``feats`` ``(B, d, h, w)``; ``coarse`` full-resolution ``(B, H, W)`` soft mask."""
        h, w = feats.shape[-2:]
        if coarse.shape[-2] != h * self.factor or coarse.shape[-1] != w * self.factor:
            raise ValueError(f"coarse mask {tuple(coarse.shape[-2:])} inconsistent with features {(h, w)} x{self.factor}")
        m_cd = downsample_mask(coarse.to(feats.dtype), (h, w))
        parts = [feats]
        weights = None
        if self.attention:
            A, weights = semantic_attention(m_cd, feats)
            parts.append(A)
        parts.append(m_cd[:, None])
        y = self.trunk(torch.cat(parts, dim=1))
        vis = self.visible_head(y)[:, 0] if self.visible_head is not None else None
        return RefineOutput(self.amodal_head(y)[:, 0], vis, weights)


def refine_loss(out: RefineOutput, gt_amodal: torch.Tensor, gt_visible: torch.Tensor) -> LossBreakdown:
    """Amodal BCE plus visible BCE (when the visible head exists), equal weights."""
    gt_amodal = gt_amodal.to(out.amodal_logits.dtype)
    gt_visible = gt_visible.to(out.amodal_logits.dtype)
    if (gt_visible > gt_amodal).any():
        raise DataIntegrityError("ground-truth visible mask is not contained in the amodal mask")
    terms = {"amodal": F.binary_cross_entropy_with_logits(out.amodal_logits, gt_amodal)}
    if out.visible_logits is not None:
        terms["visible"] = F.binary_cross_entropy_with_logits(out.visible_logits, gt_visible)
    return LossBreakdown(terms)
