"""Toy stand-ins for the frozen foundation models: an fMRI transformer
pretrained by masked token modeling, a patch transformer for video, and a
query transformer with learned queries cross-attending to video patches."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from fmri2text.numerics import ValidationError
from fmri2text.tokenizer import TokenSequence

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    fmri_depth: int = 4
    video_depth: int = 4
    qformer_depth: int = 2
    n_queries: int = 32
    patch: int = 8

    def __post_init__(self):
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by {self.heads} heads")
        if self.n_queries != 32:
            log.warning("query transformer uses %d queries instead of 32", self.n_queries)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, context=None, causal=False, query_hook=None):
        B, Lq, d = x.shape
        ctx = x if context is None else context
        q = self.q(x)
        if query_hook is not None:
            q = query_hook(q)
        h, dh = self.heads, d // self.heads
        q = q.view(B, Lq, h, dh).transpose(1, 2)
        k = self.k(ctx).view(B, -1, h, dh).transpose(1, 2)
        v = self.v(ctx).view(B, -1, h, dh).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if causal:
            Lk = k.shape[2]
            future = torch.ones(Lq, Lk, dtype=torch.bool).triu(1 + Lk - Lq)
            att = att.masked_fill(future, float("-inf"))
        y = att.softmax(-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, Lq, d))


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention.

    Adaptor hook points: ``query-proj`` wraps the self-attention query
    projection output, ``mlp`` wraps the MLP output.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: float, cross: bool = False, causal: bool = False):
        super().__init__()
        self.width = width
        self.causal = causal
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_cross = nn.LayerNorm(width) if cross else None
        self.cross = Attention(width, heads) if cross else None
        self.ln2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self._hooks: dict[str, nn.Module] = {}  # not registered: adaptors belong to the bank

    def set_hook(self, site: str, module: nn.Module | None) -> None:
        if module is None:
            self._hooks.pop(site, None)
        else:
            self._hooks[site] = module

    def get_hook(self, site: str):
        return self._hooks.get(site)

    def forward(self, x, context=None):
        x = x + self.attn(self.ln1(x), causal=self.causal, query_hook=self._hooks.get("query-proj"))
        if self.cross is not None:
            if context is None:
                raise ValidationError("cross-attention block needs a context sequence")
            x = x + self.cross(self.ln_cross(x), context=context)
        m = self.mlp(self.ln2(x))
        hook = self._hooks.get("mlp")
        return x + (hook(m) if hook is not None else m)


@contextlib.contextmanager
def suspend_adaptors(*modules: nn.Module):
    """Temporarily run the given modules without any adaptor hooks."""
    saved = []
    for m in modules:
        for b in m.modules():
            if isinstance(b, Block):
                saved.append((b, dict(b._hooks)))
                b._hooks.clear()
    try:
        yield
    finally:
        for b, hooks in saved:
            b._hooks.update(hooks)


# ---------------------------------------------------------------------------
# fMRI encoder

class FmriEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, token_width: int, n_tokens: int):
        super().__init__()
        d = cfg.width
        self.n_tokens = n_tokens
        self.input_proj = nn.Linear(token_width, d)
        self.pos = nn.Parameter(torch.randn(n_tokens, d) * 0.02)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.fmri_depth))
        self.norm = nn.LayerNorm(d)
        self.mae_head = nn.Linear(d, token_width)
        nn.init.zeros_(self.mae_head.weight)
        nn.init.zeros_(self.mae_head.bias)

    def forward(self, tokens: torch.Tensor, position_ids: torch.Tensor | None = None,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        if tokens.shape[-1] != self.input_proj.in_features:
            raise ValidationError(f"token width {tokens.shape[-1]} does not match encoder input {self.input_proj.in_features}")
        h = self.input_proj(tokens)
        if mask is not None:
            h = torch.where(mask.unsqueeze(-1), self.mask_token.to(h.dtype).expand_as(h), h)
        pos = self.pos if position_ids is None else self.pos[position_ids]
        h = h + pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)


def encode_fmri(seq: TokenSequence, encoder: FmriEncoder, adaptor_bank=None) -> TokenSequence:
    """Encode fMRI tokens; without a bank the frozen base forward is used."""
    ctx = suspend_adaptors(encoder) if adaptor_bank is None else contextlib.nullcontext()
    with ctx:
        out = encoder(seq.tokens, seq.position_ids)
    return TokenSequence(out, seq.position_ids, "fmri-latent")


@dataclass
class MaskingPlan:
    mask_ratio: float = 0.75

    def n_masked(self, n_tokens: int) -> int:
        k = int(round(self.mask_ratio * n_tokens))
        if not 0 < self.mask_ratio < 1 or k == 0:
            raise ValidationError(f"mask ratio {self.mask_ratio} masks no tokens out of {n_tokens}")
        if k >= n_tokens:
            raise ValidationError(f"mask ratio {self.mask_ratio} leaves no visible tokens out of {n_tokens}")
        return k

    def sample(self, batch: int, n_tokens: int, rng: np.random.Generator) -> torch.Tensor:
        k = self.n_masked(n_tokens)
        mask = np.zeros((batch, n_tokens), dtype=bool)
        for b in range(batch):
            mask[b, rng.choice(n_tokens, k, replace=False)] = True
        return torch.from_numpy(mask)


def mae_loss(tokens: torch.Tensor, mask: torch.Tensor, encoder: FmriEncoder) -> torch.Tensor:
    """Mean squared error of reconstructed tokens at masked positions only."""
    with suspend_adaptors(encoder):
        pred = encoder.mae_head(encoder(tokens, mask=mask))
    return (pred - tokens).pow(2)[mask].mean()


def mae_pretrain_step(tokens: torch.Tensor, plan: MaskingPlan, encoder: FmriEncoder,
                      optimizer: torch.optim.Optimizer, rng: np.random.Generator) -> float:
    mask = plan.sample(tokens.shape[0], tokens.shape[1], rng)
    loss = mae_loss(tokens.detach(), mask, encoder)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# video encoder and query transformer

class VideoEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, frames: int, size: int, channels: int):
        super().__init__()
        if size % cfg.patch:
            raise ValidationError(f"frame size {size} not divisible by patch {cfg.patch}")
        self.patch = cfg.patch
        self.n_tokens = frames * (size // cfg.patch) ** 2
        self.embed = nn.Linear(cfg.patch * cfg.patch * channels, cfg.width)
        self.pos = nn.Parameter(torch.randn(self.n_tokens, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.video_depth))
        self.norm = nn.LayerNorm(cfg.width)

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        B, F_, H, W, C = frames.shape
        p = self.patch
        if H % p or W % p:
            raise ValidationError(f"frame resolution {H}x{W} not divisible by patch {p}")
        x = frames.reshape(B, F_, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, F_ * (H // p) * (W // p), p * p * C)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.embed(self.patchify(frames))
        if h.shape[1] != self.n_tokens:
            raise ValidationError(f"clip yields {h.shape[1]} patches, encoder built for {self.n_tokens}")
        h = h + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)


def encode_video(frames: torch.Tensor, encoder: VideoEncoder) -> TokenSequence:
    single = frames.dim() == 4
    out = encoder(frames.unsqueeze(0) if single else frames)
    return TokenSequence.ordered(out[0] if single else out, "video-patch")


class QFormer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio, cross=True) for _ in range(cfg.qformer_depth))
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-2] == 0:
            raise ValidationError("query transformer needs at least one patch token")
        h = self.queries.to(patches.dtype).expand(patches.shape[0], -1, -1)
        for blk in self.blocks:
            h = blk(h, context=patches)
        return self.norm(h)


def qformer_forward(patches: TokenSequence, qformer: QFormer, adaptor_bank=None) -> TokenSequence:
    tokens = patches.tokens
    single = tokens.dim() == 2
    ctx = suspend_adaptors(qformer) if adaptor_bank is None else contextlib.nullcontext()
    with ctx:
        out = qformer(tokens.unsqueeze(0) if single else tokens)
    return TokenSequence.ordered(out[0] if single else out, "query")


__all__ = [
    "EncoderConfig", "Attention", "Block", "suspend_adaptors", "FmriEncoder", "encode_fmri",
    "MaskingPlan", "mae_loss", "mae_pretrain_step", "VideoEncoder", "encode_video", "QFormer",
    "qformer_forward",
]
