"""Training objectives for both stages.

Conventions: ``z_fmri`` holds the adapted fMRI embeddings and ``z_video`` the
video embeddings they are aligned to; logs are natural.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from fmri2text.numerics import ValidationError, cosine_matrix


@dataclass
class Stage1Config:
    tau_clip: float = 0.05
    learn_tau: bool = True
    tau_min: float = 0.01
    tau_max: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.tau_clip <= 0:
            raise ValidationError("tau_clip must be positive")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class Stage2Config:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam}")


class Temperature(nn.Module):
    """Contrastive temperature, optionally learnable, clamped to [lo, hi]."""

    def __init__(self, init: float = 0.05, lo: float = 0.01, hi: float = 0.5, learnable: bool = True):
        super().__init__()
        self.lo, self.hi = lo, hi
        self.value = nn.Parameter(torch.tensor(float(init)), requires_grad=learnable)

    def forward(self) -> torch.Tensor:
        return self.value.clamp(self.lo, self.hi)


def clip_loss(z_fmri: torch.Tensor, z_video: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric contrastive loss over a batch with positives on the diagonal.

    ``sim[i, j]`` is the cosine similarity of fMRI row i and video row j; the
    loss sums the row-wise (fMRI -> video) and column-wise (video -> fMRI)
    log-softmax at the diagonal and averages over the batch.
    """
    if z_fmri.shape != z_video.shape or z_fmri.dim() != 2:
        raise ValidationError(f"clip_loss needs two (B, d) tensors, got {tuple(z_fmri.shape)} and {tuple(z_video.shape)}")
    logits = cosine_matrix(z_fmri, z_video) / tau
    diag = torch.arange(logits.shape[0])
    fmri_to_video = logits.log_softmax(dim=1)[diag, diag]
    video_to_fmri = logits.log_softmax(dim=0)[diag, diag]
    return -(fmri_to_video + video_to_fmri).mean()


def recon_l2l1_loss(x_tokens: torch.Tensor, z_tokens: torch.Tensor, alpha: float) -> torch.Tensor:
    """(1 - alpha) * squared L2 plus alpha * L1 of token differences, averaged
    over the N x L token positions."""
    if x_tokens.shape != z_tokens.shape or x_tokens.dim() != 3:
        raise ValidationError(f"recon_l2l1_loss needs equal (N, L, d) tensors, got {tuple(x_tokens.shape)} and {tuple(z_tokens.shape)}")
    diff = z_tokens - x_tokens
    per_token = (1 - alpha) * diff.pow(2).sum(-1) + alpha * diff.abs().sum(-1)
    return per_token.mean()


def stage1_total(l_clip, l_recon, beta: float):
    return beta * l_clip + (1 - beta) * l_recon


def ce_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None,
            reduction: str = "batch") -> torch.Tensor:
    """Token cross-entropy summed over unmasked positions.

    ``reduction="batch"`` divides the sum by the batch size B (the training
    objective); ``"token"`` divides by the number of counted tokens (monitoring).
    """
    B, T, V = logits.shape
    if targets.shape != (B, T):
        raise ValidationError(f"targets shape {tuple(targets.shape)} does not match logits {(B, T)}")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    live = targets[mask]
    if live.numel() and (int(live.min()) < 0 or int(live.max()) >= V):
        raise ValidationError(f"target id out of vocabulary range [0, {V})")
    safe = torch.where(mask, targets, torch.zeros_like(targets))
    nll = -logits.log_softmax(-1).gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    total = (nll * mask).sum()
    if reduction == "batch":
        return total / B
    if reduction == "token":
        return total / mask.sum().clamp_min(1)
    raise ValidationError(f"unknown reduction {reduction!r}")


def stage2_total(l_ce, l_da, lam: float):
    return lam * l_ce + (1 - lam) * l_da


def token_accuracy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> float:
    hit = (logits.argmax(-1) == targets) & mask
    return float(hit.sum()) / max(int(mask.sum()), 1)


__all__ = [
    "Stage1Config", "Stage2Config", "Temperature", "clip_loss", "recon_l2l1_loss",
    "stage1_total", "ce_loss", "stage2_total", "token_accuracy",
]
