"""Neighborhood clustering and entropy separation over a target-feature memory."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from fmri2text.numerics import ValidationError, row_entropy


@dataclass
class DAConfig:
    tau_nc: float = 0.5
    rho: float | None = None  # None -> log(C) / 2
    margin: float = 0.1
    head_temperature: float = 0.05

    def __post_init__(self):
        if self.tau_nc <= 0:
            raise ValidationError("tau_nc must be positive")
        if self.margin < 0 or (self.rho is not None and self.rho < 0):
            raise ValidationError("margin and rho must be nonnegative")

    def rho_for(self, n_classes: int) -> float:
        return math.log(n_classes) / 2 if self.rho is None else self.rho


class ClassifierHead(nn.Module):
    """Linear head whose (row-normalized) weights double as class prototypes."""

    def __init__(self, width: int, n_classes: int, temperature: float = 0.05):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, width) * width ** -0.5)
        self.temperature = temperature

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def prototypes(self) -> torch.Tensor:
        return F.normalize(self.weight, dim=-1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f @ self.prototypes().T / self.temperature

    def probs(self, f: torch.Tensor) -> torch.Tensor:
        return self(f).softmax(-1)

    @torch.no_grad()
    def init_from_means(self, features: torch.Tensor, labels: torch.Tensor) -> None:
        for c in range(self.n_classes):
            rows = features[labels == c]
            if len(rows):
                self.weight[c] = F.normalize(rows.mean(0), dim=-1)


class MemoryPool:
    """L2-normalized feature rows of the target adaptation pool, keyed by sample id."""

    def __init__(self, sample_ids: Sequence[int], features: torch.Tensor):
        if len(sample_ids) != features.shape[0]:
            raise ValidationError("one feature row per sample id is required")
        self.ids = [int(i) for i in sample_ids]
        self.row_of = {sid: r for r, sid in enumerate(self.ids)}
        if len(self.row_of) != len(self.ids):
            raise ValidationError("duplicate sample ids in memory pool")
        self.features = F.normalize(features.detach().clone(), dim=-1)

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self, sample_ids: Sequence[int]) -> torch.Tensor:
        try:
            return torch.tensor([self.row_of[int(s)] for s in sample_ids], dtype=torch.long)
        except KeyError as err:
            raise ValidationError(f"sample id {err.args[0]} is not in the memory pool") from None

    def state_dict(self) -> dict:
        return {"ids": list(self.ids), "features": self.features.clone()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryPool":
        pool = cls(state["ids"], state["features"])
        pool.features = state["features"].detach().clone()  # stored rows are already normalized
        return pool


def _candidate_logits(f: torch.Tensor, rows: torch.Tensor, pool: MemoryPool, head: ClassifierHead,
                      tau: float) -> torch.Tensor:
    """Logits over memory rows (own row removed) then prototypes, shape (B, N + C - 1)."""
    if len(pool) == 0:
        raise ValidationError("memory pool is empty")
    bank = torch.cat([pool.features.to(f.dtype), head.prototypes()], dim=0)
    logits = f @ bank.T / tau
    keep = torch.ones_like(logits, dtype=torch.bool)
    keep[torch.arange(len(rows)), rows] = False
    return logits[keep].reshape(len(rows), -1)


def similarity_distribution(f_i: torch.Tensor, sample_id: int, pool: MemoryPool, head: ClassifierHead,
                            tau_nc: float) -> torch.Tensor:
    """Softmax over the other N - 1 memory rows and the C prototypes.

    Returns a length N + C - 1 vector ordered as memory rows (own row removed)
    followed by prototypes.
    """
    rows = pool.rows([sample_id])
    return _candidate_logits(f_i.reshape(1, -1), rows, pool, head, tau_nc)[0].softmax(-1)


def nc_loss(features: torch.Tensor, sample_ids: Sequence[int], pool: MemoryPool, head: ClassifierHead,
            tau_nc: float) -> torch.Tensor:
    """Mean entropy of each feature's similarity distribution over the memory."""
    rows = pool.rows(sample_ids)
    logp = _candidate_logits(features, rows, pool, head, tau_nc).log_softmax(-1)
    return -(logp.exp() * logp).sum(-1).mean()


def es_loss(class_probs: torch.Tensor, rho: float, margin: float) -> torch.Tensor:
    """Entropy separation: -|H - rho| outside the band |H - rho| <= margin, else 0."""
    gap = (row_entropy(class_probs) - rho).abs()
    return torch.where(gap > margin, -gap, torch.zeros_like(gap)).mean()


@torch.no_grad()
def update_memory(pool: MemoryPool, sample_ids: Sequence[int], features: torch.Tensor) -> MemoryPool:
    rows = pool.rows(sample_ids)
    if features.shape != (len(rows), pool.features.shape[1]):
        raise ValidationError(f"expected features of shape {(len(rows), pool.features.shape[1])}")
    # row-by-row so repeated ids resolve last-writer-wins
    for r, feat in zip(rows.tolist(), F.normalize(features.detach(), dim=-1).to(pool.features.dtype)):
        pool.features[r] = feat
    return pool
