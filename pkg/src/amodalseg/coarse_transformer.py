"""Mask-and-predict transformer over codec tokens.

Training hides a random 50-100% of the amodal tokens and scores the
hidden ones with a negative log-likelihood. Inference starts from an
all-[MASK] grid and, over K rounds, predicts every position, keeps the
most confident predictions and re-masks the rest according to a
schedule.

The video variant factorises attention into a spatial layer (within a
frame) and a causal temporal layer (across frames at one position), and
cyclically rolls the frame axis by T/2 after every block so that early
frames also receive information from late ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import TokenEmbedding, flatten_grid
from .config import MaskingPolicy, ModelConfig
from .mask_vq import LossBreakdown

GAMMAS: dict[str, Callable[[float], float]] = {
    "cosine": lambda r: math.cos(math.pi * r / 2.0),
    "linear": lambda r: 1.0 - r,
}


@dataclass
class DecodeSchedule:
    K: int
    gamma: str
    counts: list[int] = field(default_factory=list)  # tokens left masked after each step


def build_schedule(N: int, K: int = 3, gamma: str = "cosine") -> DecodeSchedule:
    """Masked-token count after step t is ``ceil(gamma(t/K) * N)``.

    Counts are clamped so that every step commits at least one token,
    which keeps them strictly decreasing; this needs ``K <= N``.
    """
    if gamma not in GAMMAS:
        raise ValueError(f"unknown schedule {gamma!r}; choose from {sorted(GAMMAS)}")
    if N < 1 or K < 1:
        raise ValueError("need N >= 1 and K >= 1")
    if K > N:
        raise ValueError(f"cannot finish {N} tokens in {K} strictly decreasing steps")
    fn = GAMMAS[gamma]
    counts, prev = [], N
    for t in range(1, K + 1):
        raw = math.ceil(fn(t / K) * N - 1e-9)  # cos(pi/3) * 16 must give 8, not 9
        c = min(max(raw, K - t), prev - 1)
        counts.append(c)
        prev = c
    return DecodeSchedule(K=K, gamma=gamma, counts=counts)


def sample_training_mask(
    tokens: torch.Tensor,
    mask_id: int,
    policy: MaskingPolicy | None = None,
    generator: torch.Generator | None = None,
    ratio: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace ``round(r * N)`` uniformly chosen tokens per sample by the sentinel.

    ``r`` is drawn per sample from ``U[ratio_low, ratio_high]`` unless given.
    Works on ``(B, N)`` or ``(B, h, w)`` grids.
    """
    policy = policy or MaskingPolicy()
    if (tokens == mask_id).any():
        raise ValueError("input tokens already contain the [MASK] sentinel")
    shape = tokens.shape
    flat = tokens.reshape(shape[0], -1)
    B, N = flat.shape
    if ratio is None:
        u = torch.rand(B, generator=generator, dtype=torch.float64)
        ratio = policy.ratio_low + (policy.ratio_high - policy.ratio_low) * u
    n_mask = torch.floor(ratio.double() * N + 0.5).long().clamp(0, N)
    rank = torch.rand(B, N, generator=generator).argsort(dim=1).argsort(dim=1)
    masked = rank < n_mask[:, None]
    out = flat.masked_fill(masked, mask_id)
    return out.reshape(shape), masked.reshape(shape)


def masked_nll_loss(logits: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> LossBreakdown:
    """Mean negative log-likelihood over masked positions only."""
    masked = masked.reshape(target.shape[0], -1)
    if not masked.any():
        raise ValueError("masked position set is empty")
    logits = logits.reshape(masked.shape[0], masked.shape[1], -1)
    nll = F.cross_entropy(logits[masked], target.reshape(masked.shape)[masked])
    return LossBreakdown({"nll": nll})


@torch.no_grad()
def iterative_decode(
    predict: Callable[[torch.Tensor], torch.Tensor],
    batch: int,
    n_tokens: int,
    schedule: DecodeSchedule,
    mask_id: int,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
) -> tuple[torch.Tensor, list[dict]]:
    """Confidence-based parallel decoding.

    ``predict`` maps a ``(B, N)`` token grid (with sentinels) to ``(B, N, K_cb)``
    logits. Each step samples a token for every masked position (argmax on
    the last step), scores it by its probability, gives committed positions
    confidence 1.0, and re-masks the scheduled number of lowest-confidence
    positions. Ties rank uncommitted positions first, then by index.
    Returns the final tokens and a per-step trace.
    """
    tokens = torch.full((batch, n_tokens), mask_id, dtype=torch.long)
    committed = torch.zeros(batch, n_tokens, dtype=torch.bool)
    positions = torch.arange(n_tokens).expand(batch, n_tokens)
    trace = []
    for step, n_mask in enumerate(schedule.counts, start=1):
        logits = predict(tokens).double()
        probs = torch.softmax(logits / temperature, dim=-1)
        if step < schedule.K:
            flat = probs.reshape(-1, probs.shape[-1])
            sampled = torch.multinomial(flat, 1, generator=generator).reshape(batch, n_tokens)
        else:
            sampled = probs.argmax(-1)
        conf = probs.gather(-1, sampled[..., None])[..., 0]
        sampled = torch.where(committed, tokens, sampled)
        conf = torch.where(committed, torch.ones_like(conf), conf)
        # lexicographic (confidence, committed, index) via successive stable sorts
        order = positions.clone()
        order = order.gather(1, committed.long().gather(1, order).sort(dim=1, stable=True).indices)
        order = order.gather(1, conf.gather(1, order).sort(dim=1, stable=True).indices)
        new = sampled.clone()
        new.scatter_(1, order[:, :n_mask], mask_id)
        trace.append({"step": step, "predicted": sampled.clone(), "confidence": conf.float(), "tokens": new.clone()})
        tokens = new
        committed = tokens != mask_id
    return tokens, trace


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, causal: bool = False):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        return self.out(y.transpose(1, 2).reshape(B, L, D))


def _mlp(d: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, ratio * d), nn.GELU(), nn.Linear(ratio * d, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = _mlp(d, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class STBlock(nn.Module):
    """Spatial attention within each frame, then causal temporal attention per position.

    Input and output are ``(B, T, L, d)``.
    """

    def __init__(self, d: int, heads: int, mlp_ratio: int = 4, temporal: bool = True):
        super().__init__()
        self.norm_s = nn.LayerNorm(d)
        self.spatial = Attention(d, heads)
        self.temporal = temporal
        if temporal:
            self.norm_t = nn.LayerNorm(d)
            self.temporal_attn = Attention(d, heads, causal=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = _mlp(d, mlp_ratio)

    def spatial_layer(self, x: torch.Tensor) -> torch.Tensor:
        B, T, L, D = x.shape
        s = x.reshape(B * T, L, D)
        return (s + self.spatial(self.norm_s(s))).reshape(B, T, L, D)

    def temporal_layer(self, x: torch.Tensor) -> torch.Tensor:
        B, T, L, D = x.shape
        t = x.permute(0, 2, 1, 3).reshape(B * L, T, D)
        t = t + self.temporal_attn(self.norm_t(t))
        return t.reshape(B, L, T, D).permute(0, 2, 1, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.spatial_layer(x)
        if self.temporal:
            x = self.temporal_layer(x)
        return x + self.mlp(self.norm2(x))


def sttb_forward(block: STBlock, sequence: torch.Tensor, T: int) -> torch.Tensor:
    """Apply one block to a flat ``(B, T*L, d)`` sequence of T frames."""
    B, n, D = sequence.shape
    if n % T:
        raise ValueError(f"sequence length {n} not divisible by T={T}")
    return block(sequence.reshape(B, T, n // T, D)).reshape(B, n, D)


def temporal_roll(sequence: torch.Tensor, T: int, shift: int | None = None) -> torch.Tensor:
    """Cyclically shift frame slots of a ``(B, T*L, ...)`` sequence by ``shift`` (default T/2)."""
    if T % 2:
        raise ValueError(f"temporal roll needs an even frame count, got T={T}")
    shift = T // 2 if shift is None else shift
    B, n = sequence.shape[:2]
    if n % T:
        raise ValueError(f"sequence length {n} not divisible by T={T}")
    framed = sequence.reshape(B, T, n // T, *sequence.shape[2:])
    return torch.roll(framed, shifts=shift, dims=1).reshape(sequence.shape)


def temporal_unroll(sequence: torch.Tensor, T: int, shift: int | None = None) -> torch.Tensor:
    shift = T // 2 if shift is None else shift
    return temporal_roll(sequence, T, -shift)


class MaskPredictTransformer(nn.Module):
    """Bidirectional transformer over [image features, visible tokens, amodal tokens]."""

    def __init__(self, codebook_size: int, n_tokens: int, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        self.codebook_size = codebook_size
        self.n_tokens = n_tokens
        self.embed = TokenEmbedding(codebook_size, cfg.d, n_tokens)
        self.segment = nn.Embedding(3, cfg.d)  # image / visible / amodal stream
        nn.init.normal_(self.segment.weight, std=0.02)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, codebook_size)

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def embed_inputs(self, feats: torch.Tensor, vis_tokens: torch.Tensor, amodal_tokens: torch.Tensor):
        v_img = flatten_grid(feats) + self.embed.pos
        return v_img, self.embed(vis_tokens), self.embed(amodal_tokens)

    def forward_logits(self, v_img: torch.Tensor, v_vis: torch.Tensor, v_amodal: torch.Tensor) -> torch.Tensor:
        """Logits over codebook entries at the amodal positions only."""
        if not (v_img.shape[-1] == v_vis.shape[-1] == v_amodal.shape[-1] == self.cfg.d):
            raise ValueError("image, visible and amodal sequences must share the model width")
        seg = self.segment.weight
        x = torch.cat([v_img + seg[0], v_vis + seg[1], v_amodal + seg[2]], dim=1)
        for blk in self.blocks:
            x = blk(x)
        n = v_amodal.shape[1]
        return self.head(self.norm(x[:, -n:]))

    def forward(self, feats: torch.Tensor, vis_tokens: torch.Tensor, amodal_tokens: torch.Tensor) -> torch.Tensor:
        return self.forward_logits(*self.embed_inputs(feats, vis_tokens, amodal_tokens))

    @torch.no_grad()
    def decode(self, feats, vis_tokens, schedule: DecodeSchedule, generator=None, temperature: float = 1.0):
        v_img = flatten_grid(feats) + self.embed.pos
        v_vis = self.embed(vis_tokens)
        B, N = v_vis.shape[:2]
        tokens, trace = iterative_decode(
            lambda t: self.forward_logits(v_img, v_vis, self.embed(t)),
            B,
            N,
            schedule,
            self.mask_id,
            generator,
            temperature,
        )
        return tokens.reshape(vis_tokens.shape), trace


class VideoMaskPredictTransformer(nn.Module):
    """Per-frame [image, visible, amodal] streams processed by spatio-temporal blocks.

    ``roll`` toggles the T/2 frame roll between blocks; ``temporal=False``
    drops the temporal layers so frames are processed independently.
    """

    def __init__(
        self,
        codebook_size: int,
        n_tokens: int,
        cfg: ModelConfig | None = None,
        roll: bool = True,
        temporal: bool = True,
    ):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        if roll and not temporal:
            raise ValueError("roll requires temporal layers")
        self.cfg = cfg
        self.T = cfg.frames
        if roll and self.T % 2:
            raise ValueError("roll needs an even frame count")
        self.roll = roll
        self.codebook_size = codebook_size
        self.n_tokens = n_tokens
        self.embed = TokenEmbedding(codebook_size, cfg.d, n_tokens)
        self.segment = nn.Embedding(3, cfg.d)
        nn.init.normal_(self.segment.weight, std=0.02)
        if temporal:
            self.time_pos = nn.Parameter(torch.zeros(self.T, cfg.d))
            nn.init.normal_(self.time_pos, std=0.02)
        else:
            self.register_parameter("time_pos", None)
        self.blocks = nn.ModuleList(STBlock(cfg.d, cfg.heads, cfg.mlp_ratio, temporal) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, codebook_size)

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    def run_blocks(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T, L, d)`` through every block, rolling frames after each and restoring order at the end."""
        B, T, L, D = x.shape
        total = 0
        for blk in self.blocks:
            x = blk(x)
            if self.roll:
                x = temporal_roll(x.reshape(B, T * L, D), T).reshape(B, T, L, D)
                total += T // 2
        if self.roll and total % T:
            x = temporal_unroll(x.reshape(B, T * L, D), T, total % T).reshape(B, T, L, D)
        return x

    def forward_logits(self, v_img: torch.Tensor, v_vis: torch.Tensor, v_amodal: torch.Tensor) -> torch.Tensor:
        """Inputs ``(B, T, N, d)``; returns ``(B, T, N, K_cb)`` logits for the amodal stream."""
        seg = self.segment.weight
        x = torch.cat([v_img + seg[0], v_vis + seg[1], v_amodal + seg[2]], dim=2)
        if self.time_pos is not None:
            x = x + self.time_pos[None, :, None, :]
        x = self.run_blocks(x)
        n = v_amodal.shape[2]
        return self.head(self.norm(x[:, :, -n:]))

    def embed_inputs(self, feats: torch.Tensor, vis_tokens: torch.Tensor, amodal_tokens: torch.Tensor):
        """feats ``(B, T, d, h, w)``, tokens ``(B, T, h, w)``."""
        B, T = feats.shape[:2]
        v_img = flatten_grid(feats.flatten(0, 1)) + self.embed.pos
        v_vis = self.embed(vis_tokens.flatten(0, 1))
        v_amo = self.embed(amodal_tokens.flatten(0, 1))
        return tuple(v.reshape(B, T, *v.shape[1:]) for v in (v_img, v_vis, v_amo))

    def forward(self, feats, vis_tokens, amodal_tokens) -> torch.Tensor:
        return self.forward_logits(*self.embed_inputs(feats, vis_tokens, amodal_tokens))

    @torch.no_grad()
    def decode(self, feats, vis_tokens, schedule: DecodeSchedule, generator=None, temperature: float = 1.0):
        """Decode all ``T * N`` amodal tokens of each clip jointly."""
        B, T = feats.shape[:2]
        v_img, v_vis, _ = self.embed_inputs(feats, vis_tokens, vis_tokens)
        N = v_vis.shape[2]

        def predict(t: torch.Tensor) -> torch.Tensor:
            v_amo = self.embed(t.reshape(B * T, N)).reshape(B, T, N, -1)
            return self.forward_logits(v_img, v_vis, v_amo).reshape(B, T * N, -1)

        tokens, trace = iterative_decode(predict, B, T * N, schedule, self.mask_id, generator, temperature)
        return tokens.reshape(vis_tokens.shape), trace
