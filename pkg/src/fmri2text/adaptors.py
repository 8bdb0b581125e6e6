"""Nonlinear low-rank adaptors, the fMRI-to-decoder projection adaptor, and
their insertion into frozen transformer blocks."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import torch
import torch.nn as nn

from fmri2text.numerics import ValidationError

SITES = ("query-proj", "mlp")


def _activation(name: str):
    if name == "gelu":
        return nn.GELU()
    if name == "identity":
        return nn.Identity()
    raise ValidationError(f"unknown activation {name!r}")


def default_rank(width: int) -> int:
    return max(4, width // 16)


class NonlinearLowRankAdaptor(nn.Module):
    """h + scale * up(act(down(h))); ``up`` starts at zero so the adaptor is
    transparent when inserted."""

    def __init__(self, width: int, rank: int | None = None, scale: float = 1.0, activation: str = "gelu"):
        super().__init__()
        rank = default_rank(width) if rank is None else rank
        self.down = nn.Linear(width, rank, bias=True)
        self.act = _activation(activation)
        self.up = nn.Linear(rank, width, bias=False)
        nn.init.zeros_(self.up.weight)
        self.scale = scale

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.down.in_features:
            raise ValidationError(f"adaptor expects width {self.down.in_features}, got {h.shape[-1]}")
        return h + self.scale * self.up(self.act(self.down(h)))


def adaptor_forward(h: torch.Tensor, adaptor: NonlinearLowRankAdaptor) -> torch.Tensor:
    return adaptor(h)


class ProjectionAdaptor(nn.Module):
    """Maps L_in fMRI latent tokens of width d to L_out decoder-width tokens.

    Each token goes through a d -> hidden -> out bottleneck; a learned token
    mixer then resamples the L_in tokens to L_out media tokens.
    """

    def __init__(self, width: int, hidden: int, out_width: int, in_tokens: int, out_tokens: int,
                 activation: str = "gelu"):
        super().__init__()
        self.down = nn.Linear(width, hidden)
        self.act = _activation(activation)
        self.up = nn.Linear(hidden, out_width)
        self.mix = nn.Linear(in_tokens, out_tokens, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.up(self.act(self.down(tokens)))
        return self.mix(h.transpose(-1, -2)).transpose(-1, -2)


class HasSites(Protocol):
    def insertion_sites(self) -> dict[str, list[nn.Module]]: ...


@dataclass
class AdaptorPolicy:
    modules: tuple[str, ...] = ("fmri_encoder", "qformer")
    sites: tuple[str, ...] = SITES
    rank: int | None = None
    scale: float = 1.0
    activation: str = "gelu"
    projection: dict | None = field(default=None)


class AdaptorBank(nn.Module):
    """All adaptor parameters, kept apart from the frozen base weights.

    Adaptors reach the base model through per-block hooks; ``detach`` removes
    every hook so the base model behaves exactly as before insertion.
    """

    def __init__(self):
        super().__init__()
        self.adaptors = nn.ModuleDict()
        self.projection: ProjectionAdaptor | None = None
        self._blocks: dict[str, tuple[nn.Module, str]] = {}

    @staticmethod
    def key(module_id: str, layer: int, site: str) -> str:
        return f"{module_id}__{layer}__{site}"

    def groups(self) -> dict[str, list[nn.Parameter]]:
        out: dict[str, list[nn.Parameter]] = {}
        for k, a in self.adaptors.items():
            out.setdefault(f"adaptors.{k.split('__')[0]}", []).extend(a.parameters())
        if self.projection is not None:
            out["adaptors.projection"] = list(self.projection.parameters())
        return out

    def module_params(self, module_id: str) -> list[nn.Parameter]:
        return self.groups().get(f"adaptors.{module_id}", [])

    def attach(self) -> None:
        for k, (block, site) in self._blocks.items():
            block.set_hook(site, self.adaptors[k])

    def detach(self) -> None:
        for block, site in self._blocks.values():
            block.set_hook(site, None)

    @contextlib.contextmanager
    def suspended(self):
        self.detach()
        try:
            yield
        finally:
            self.attach()


def insert_adaptors(model: HasSites, policy: AdaptorPolicy) -> AdaptorBank:
    """Create one adaptor per (layer, site) of each policy module and hook it in."""
    available = model.insertion_sites()
    for site in policy.sites:
        if site not in SITES:
            raise ValidationError(f"unknown insertion site {site!r}; valid sites are {SITES}")
    bank = AdaptorBank()
    for module_id in policy.modules:
        if module_id not in available:
            raise ValidationError(f"model has no adaptor-capable module {module_id!r}")
        for layer, block in enumerate(available[module_id]):
            for site in policy.sites:
                if block.get_hook(site) is not None:
                    raise ValidationError(f"{module_id} layer {layer} already has an adaptor at {site}")
                adaptor = NonlinearLowRankAdaptor(block.width, policy.rank, policy.scale, policy.activation)
                key = AdaptorBank.key(module_id, layer, site)
                bank.adaptors[key] = adaptor
                bank._blocks[key] = (block, site)
    if policy.projection:
        bank.projection = ProjectionAdaptor(activation=policy.activation, **policy.projection)
    bank.attach()
    return bank


@dataclass
class ParamCount:
    trainable: int
    frozen: int

    @property
    def ratio(self) -> float:
        total = self.trainable + self.frozen
        return self.trainable / total if total else 0.0


def count_params(bank: AdaptorBank, frozen: Iterable[nn.Module] = (), extra_trainable: Iterable[nn.Module] = ()) -> ParamCount:
    trainable = sum(p.numel() for p in bank.parameters())
    trainable += sum(p.numel() for m in extra_trainable for p in m.parameters())
    frozen_n = sum(p.numel() for m in frozen for p in m.parameters())
    return ParamCount(trainable, frozen_n)


__all__ = [
    "SITES", "NonlinearLowRankAdaptor", "ProjectionAdaptor", "AdaptorPolicy", "AdaptorBank",
    "adaptor_forward", "insert_adaptors", "count_params", "ParamCount", "default_rank",
]
