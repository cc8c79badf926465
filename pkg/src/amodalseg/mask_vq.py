"""Vector-quantised codec for binary masks.

Masks are encoded to an ``h x w x n_z`` latent grid, snapped to the
nearest codebook entry per cell, and decoded back to per-pixel
probabilities. Gradients pass the quantiser with the straight-through
estimator.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_hash
from .config import CodecConfig, TrainConfig, VqLossConfig

log = logging.getLogger(__name__)

THRESHOLD = 0.5


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class LossBreakdown:
    """Named loss terms and the weights that combine them into ``total``."""

    terms: dict[str, torch.Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    def weighted(self) -> dict[str, torch.Tensor]:
        return {k: v * self.weights.get(k, 1.0) for k, v in self.terms.items()}

    @property
    def total(self) -> torch.Tensor:
        return sum(self.weighted().values())  # type: ignore[return-value]

    def check_finite(self, step: int = -1) -> None:
        for name, value in self.terms.items():
            if not torch.isfinite(value).all():
                raise DivergenceError(step, f"non-finite {name} loss")

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.weighted().items()}
        out["total"] = float(self.total.detach())
        return out


def binarize(x, threshold: float = THRESHOLD):
    return x >= threshold


def quantize(latent: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Nearest codebook index per cell of a channel-last latent ``(..., n_z)``.

    Squared distances are formed by direct differences, not the expanded
    quadratic, so exact ties stay exact; ``argmin`` keeps the lowest index.
    """
    if latent.shape[-1] != codebook.shape[1]:
        raise ValueError(f"latent channel dim {latent.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = latent.reshape(-1, latent.shape[-1])
    dist = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    return dist.argmin(dim=1).reshape(latent.shape[:-1])


def lookup(tokens: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Codebook vectors for an index grid; the result is channel-last."""
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= codebook.shape[0]):
        raise ValueError("token grid contains the [MASK] sentinel or an out-of-range index")
    return codebook[tokens]


class ResBlock(nn.Module):
    def __init__(self, ch: int, kernel: int = 3):
        super().__init__()
        self.block = nn.Sequential(nn.ReLU(), nn.Conv2d(ch, ch, kernel, padding=kernel // 2), nn.ReLU(), nn.Conv2d(ch, ch, 1))

    def forward(self, x):
        return x + self.block(x)


class MaskCodec(nn.Module):
    """Conv encoder/decoder around a learned codebook. No attention layers."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        cfg = cfg or CodecConfig()
        cfg.validate()
        self.cfg = cfg
        stages = int(math.log2(cfg.factor))
        h = cfg.hidden
        enc: list[nn.Module] = [nn.Conv2d(1, h // 2, 3, padding=1), nn.ReLU()]
        ch = h // 2
        for _ in range(stages):
            enc += [nn.Conv2d(ch, h, 4, stride=2, padding=1), nn.ReLU()]
            ch = h
        enc += [ResBlock(h, cfg.latent_kernel) for _ in range(cfg.res_blocks)]
        enc += [nn.ReLU(), nn.Conv2d(h, cfg.n_z, 1)]
        self.encoder = nn.Sequential(*enc)

        lk = cfg.latent_kernel
        dec: list[nn.Module] = [nn.Conv2d(cfg.n_z, h, lk, padding=lk // 2)]
        dec += [ResBlock(h, lk) for _ in range(cfg.res_blocks)]
        for i in range(stages):
            out = h // 2 if i == stages - 1 else h
            dec += [nn.ReLU(), nn.ConvTranspose2d(h, out, 4, stride=2, padding=1)]
        dec += [nn.ReLU()]
        self.decoder = nn.Sequential(*dec)
        self.last_layer = nn.Conv2d(h // 2, 1, 3, padding=1)

        self.codebook = nn.Embedding(cfg.codebook_size, cfg.n_z)
        bound = 1.0 / cfg.codebook_size
        nn.init.uniform_(self.codebook.weight, -bound, bound)

    @property
    def codebook_size(self) -> int:
        return self.cfg.codebook_size

    @property
    def factor(self) -> int:
        return self.cfg.factor

    def _as_input(self, mask) -> torch.Tensor:
        x = torch.as_tensor(mask)
        if x.dim() == 2:
            x = x[None]
        x = x.float()
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ValueError(f"mask size {H}x{W} not divisible by downsampling factor {self.factor}")
        return x[:, None] if x.dim() == 3 else x

    def encode(self, mask) -> torch.Tensor:
        """Continuous latent, channel-last ``(B, h, w, n_z)``."""
        return self.encoder(self._as_input(mask).to(self.codebook.weight.dtype)).permute(0, 2, 3, 1)

    def quantize(self, latent: torch.Tensor) -> torch.Tensor:
        return quantize(latent, self.codebook.weight)

    def lookup(self, tokens: torch.Tensor) -> torch.Tensor:
        return lookup(tokens, self.codebook.weight)

    def decode_latent_logits(self, zq: torch.Tensor) -> torch.Tensor:
        """Channel-last latent -> ``(B, H, W)`` logits."""
        return self.last_layer(self.decoder(zq.permute(0, 3, 1, 2)))[:, 0]

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token grid ``(B, h, w)`` -> per-pixel probabilities ``(B, H, W)``."""
        return torch.sigmoid(self.decode_latent_logits(self.lookup(tokens)))

    @torch.no_grad()
    def tokenize(self, mask) -> torch.Tensor:
        return self.quantize(self.encode(mask))

    @torch.no_grad()
    def reconstruct(self, mask) -> torch.Tensor:
        return self.decode(self.tokenize(mask))

    def forward(self, mask):
        z_e = self.encode(mask)
        tokens = self.quantize(z_e)
        z_q = self.lookup(tokens)
        z_st = z_e + (z_q - z_e).detach()  # straight-through
        logits = self.decode_latent_logits(z_st)
        return logits, z_e, z_q, tokens

    def content_hash(self) -> str:
        return state_hash(self.state_dict())


class PatchDiscriminator(nn.Module):
    def __init__(self, ch: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, ch, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch * 2, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x[:, None] if x.dim() == 3 else x)


def adaptive_lambda(rec_loss: torch.Tensor, gan_loss: torch.Tensor, last_weight: torch.Tensor, delta: float = 1e-6) -> torch.Tensor:
    """Balance the adversarial term by gradient norms at the decoder's last layer."""
    g_rec = torch.autograd.grad(rec_loss, last_weight, retain_graph=True)[0]
    g_gan = torch.autograd.grad(gan_loss, last_weight, retain_graph=True)[0]
    lam = g_rec.norm() / (g_gan.norm() + delta)
    return lam.clamp(0.0, 1e4).detach()


def vq_loss(
    codec: MaskCodec,
    mask,
    cfg: VqLossConfig | None = None,
    discriminator: PatchDiscriminator | None = None,
) -> LossBreakdown:
    """Reconstruction BCE + codebook + beta * commitment (+ lambda * adversarial).

    The squared-norm terms are means over latent elements.
    """
    cfg = cfg or VqLossConfig()
    target = codec._as_input(mask)[:, 0].to(codec.codebook.weight.dtype)
    logits, z_e, z_q, _ = codec(target)
    terms = {
        "reconstruction": F.binary_cross_entropy_with_logits(logits, target),
        "codebook": F.mse_loss(z_q, z_e.detach()),
        "commitment": F.mse_loss(z_e, z_q.detach()),
    }
    weights = {"reconstruction": 1.0, "codebook": 1.0, "commitment": cfg.beta}
    if cfg.gan_enabled:
        if discriminator is None:
            raise ValueError("gan_enabled requires a discriminator")
        fake = torch.sigmoid(logits)
        gan = F.softplus(-discriminator(fake)).mean()  # -log D(x_hat)
        if cfg.lambda_mode == "adaptive" and torch.is_grad_enabled():
            lam = float(adaptive_lambda(terms["reconstruction"], gan, codec.last_layer.weight, cfg.delta))
        else:
            lam = cfg.fixed_lambda
        terms["adversarial"] = gan
        weights["adversarial"] = lam
    return LossBreakdown(terms, weights)


def discriminator_loss(discriminator: PatchDiscriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-discriminator(real)).mean() + F.softplus(discriminator(fake.detach())).mean()


@torch.no_grad()
def roundtrip_iou(codec: MaskCodec, masks: np.ndarray, batch: int = 256) -> np.ndarray:
    """Per-mask IoU between ``masks`` and their thresholded reconstructions."""
    codec.eval()
    out = []
    for i in range(0, len(masks), batch):
        m = torch.as_tensor(masks[i : i + batch]).bool()
        rec = binarize(codec.reconstruct(m))
        inter = (rec & m).flatten(1).sum(1).double()
        union = (rec | m).flatten(1).sum(1).double()
        out.append(torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union)))
    return torch.cat(out).numpy()


def fit_vq(
    masks: np.ndarray,
    cfg: TrainConfig,
    codec: MaskCodec | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> tuple[MaskCodec, list[dict]]:
    """Train the codec on an ``(N, H, W)`` binary array.

    On a non-finite loss the codec is restored to the last good snapshot
    and `DivergenceError` is raised.
    """
    if len(masks) == 0:
        raise ValueError("empty mask dataset")
    torch.manual_seed(cfg.seed)
    codec = codec or MaskCodec(cfg.codec)
    codec.train()
    data = torch.as_tensor(np.asarray(masks, dtype=np.float32))
    opt = torch.optim.AdamW(codec.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    disc = d_opt = None
    if cfg.vq_loss.gan_enabled:
        disc = PatchDiscriminator()
        d_opt = torch.optim.AdamW(disc.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    good = copy.deepcopy(codec.state_dict())
    history = []
    for step in range(1, cfg.iterations + 1):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        batch = data[idx]
        losses = vq_loss(codec, batch, cfg.vq_loss, disc)
        try:
            losses.check_finite(step)
        except DivergenceError:
            codec.load_state_dict(good)
            raise
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate * cfg.lr_multiplier(step - 1)
        opt.step()
        if disc is not None:
            with torch.no_grad():
                fake = codec.decode(codec.tokenize(batch))
            d_loss = discriminator_loss(disc, batch, fake)
            d_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            d_opt.step()
        if step % cfg.checkpoint_every == 0:
            good = copy.deepcopy(codec.state_dict())
        if step % cfg.log_every == 0 or step == cfg.iterations:
            rec = {"stage": "vq", "step": step, **losses.as_floats()}
            history.append(rec)
            if callback:
                callback(step, rec)
    codec.eval()
    return codec, history


def save_codec(codec: MaskCodec, path: str | Path, extra: dict | None = None) -> str:
    digest = codec.content_hash()
    header = {
        "kind": "codec",
        "codebook_size": codec.cfg.codebook_size,
        "n_z": codec.cfg.n_z,
        "factor": codec.cfg.factor,
        "input_size": codec.cfg.input_size,
        "hidden": codec.cfg.hidden,
        "res_blocks": codec.cfg.res_blocks,
        "latent_kernel": codec.cfg.latent_kernel,
        "codec_hash": digest,
        **(extra or {}),
    }
    save_checkpoint(path, header, codec.state_dict())
    return digest


def load_codec(path: str | Path) -> MaskCodec:
    header, state = load_checkpoint(path)
    if header.get("kind") != "codec":
        raise CheckpointError(f"{path}: expected a codec checkpoint, found {header.get('kind')!r}")
    cfg = CodecConfig(
        input_size=header["input_size"],
        factor=header["factor"],
        codebook_size=header["codebook_size"],
        n_z=header["n_z"],
        hidden=header["hidden"],
        res_blocks=header.get("res_blocks", 0),
        latent_kernel=header.get("latent_kernel", 1),
    )
    codec = MaskCodec(cfg)
    codec.load_state_dict(state)
    codec.eval()
    if codec.content_hash() != header["codec_hash"]:
        raise CheckpointError(f"{path}: codec hash mismatch, file is corrupt")
    return codec
