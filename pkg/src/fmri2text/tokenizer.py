"""3D convolutional tokenizer turning a voxel series into super-voxel tokens."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from fmri2text.numerics import ValidationError

MODALITIES = ("fmri", "fmri-latent", "video-patch", "query", "text", "media")


@dataclass
class TokenizerConfig:
    kernel: tuple[int, int, int] = (4, 4, 4)
    stride: tuple[int, int, int] = (4, 4, 4)
    out_channels: int = 64
    temporal_mode: str = "frames-as-channels"

    def __post_init__(self):
        self.kernel, self.stride = tuple(self.kernel), tuple(self.stride)
        if len(self.kernel) != 3 or len(self.stride) != 3:
            raise ValidationError("kernel and stride need three components")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValidationError("kernel and stride components must be >= 1")
        if self.out_channels < 8:
            raise ValidationError("token width must be >= 8")
        if self.temporal_mode != "frames-as-channels":
            raise ValidationError(f"unsupported temporal_mode {self.temporal_mode!r}")


@dataclass
class TokenSequence:
    """Tokens shaped (L, D) or batched (B, L, D) with shared position ids."""

    tokens: torch.Tensor
    position_ids: torch.Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.tokens.shape[-2] < 1 or self.position_ids.shape != (self.tokens.shape[-2],):
            raise ValidationError("need L >= 1 tokens and one position id per token")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    @classmethod
    def ordered(cls, tokens: torch.Tensor, modality: str) -> "TokenSequence":
        return cls(tokens, torch.arange(tokens.shape[-2]), modality)


def token_grid_shape(dims, cfg: TokenizerConfig) -> tuple[int, int, int, int]:
    """Token grid (nx, ny, nz, L) for valid, unpadded convolution."""
    n = []
    for axis, (d, k, s) in enumerate(zip(dims, cfg.kernel, cfg.stride)):
        if d < k:
            raise ValidationError(f"kernel {k} exceeds input size {d} on axis {axis}")
        n.append((d - k) // s + 1)
    return n[0], n[1], n[2], n[0] * n[1] * n[2]


class SpatioTemporalTokenizer(nn.Module):
    """Single Conv3d with the T time frames as input channels.

    Weight shape is (D, T, kx, ky, kz) plus a bias of length D. Tokens come
    out in lexicographic (x, y, z) order of the grid.
    """

    def __init__(self, cfg: TokenizerConfig, frames_T: int, grid: tuple[int, int, int]):
        super().__init__()
        self.cfg = cfg
        self.frames_T = frames_T
        self.grid = tuple(grid)
        self.shape = token_grid_shape(grid, cfg)
        self.conv = nn.Conv3d(frames_T, cfg.out_channels, cfg.kernel, cfg.stride)

    @property
    def n_tokens(self) -> int:
        return self.shape[3]

    def forward(self, voxels: torch.Tensor) -> torch.Tensor:
        # voxels: (B, X, Y, Z, T) -> (B, L, D)
        if voxels.dim() != 5 or tuple(voxels.shape[1:4]) != self.grid or voxels.shape[4] != self.frames_T:
            raise ValidationError(f"expected (B, {self.grid}, T={self.frames_T}) voxels, got {tuple(voxels.shape)}")
        out = self.conv(voxels.permute(0, 4, 1, 2, 3))
        return out.flatten(2).transpose(1, 2)


def tokenize(voxels: torch.Tensor, tokenizer: SpatioTemporalTokenizer) -> TokenSequence:
    """Tokenize one (X, Y, Z, T) series or a batch of them."""
    single = voxels.dim() == 4
    tokens = tokenizer(voxels.unsqueeze(0) if single else voxels)
    return TokenSequence.ordered(tokens[0] if single else tokens, "fmri")
