"""Mouth-thumbnail embedding network: stacked 3-D conv blocks.

Each block is conv(3x3x3, stride 1) -> group norm -> ReLU -> 2x2 spatial
max pool. Group-norm statistics are taken per temporal index over the
spatial extent and the channels of each group, so time is never mixed, and
no block strides or pools the temporal axis: one embedding per input frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError

FULL_SCALE_CHANNELS = (64, 128, 256, 512, 512)
FULL_SCALE_GROUPS = 32
THUMBNAIL_SIZE = 128
GN_EPS = 1e-6


@dataclass(frozen=True)
class VideoClip:
    """Mouth thumbnails (T, H, W, 3), pixel values in [0, 1]."""

    frames: np.ndarray
    fps: Fraction
    landmarks: Optional[np.ndarray] = None   # (T, K, 2) point tracks

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError("clip frames must be (T, H, W, 3)")
        if self.frames.shape[0] < 1:
            raise ValueError("clip needs at least one frame")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class VideoEmbeddingSequence:
    embeddings: np.ndarray        # (T, dim)
    fps: Fraction


@dataclass(frozen=True)
class VideoFrontendConfig:
    block_channels: Tuple[int, ...] = FULL_SCALE_CHANNELS
    gn_groups: int = FULL_SCALE_GROUPS
    in_channels: int = 3
    input_size: int = THUMBNAIL_SIZE

    def __post_init__(self):
        for c in self.block_channels:
            if c % self.gn_groups != 0:
                raise ConfigError(
                    f"{self.gn_groups} groups do not divide {c} channels"
                )
        if self.input_size % (2 ** len(self.block_channels)) != 0:
            raise ConfigError("input size must survive one 2x2 pool per block")

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def final_grid(self) -> int:
        return self.input_size // (2 ** len(self.block_channels))


def group_norm_per_frame(
    x: torch.Tensor,
    groups: int,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = GN_EPS,
) -> torch.Tensor:
    """Normalize (B, C, T, H, W) per (batch, group, frame) over (C/g, H, W)."""
    b, c, t, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"{groups} groups do not divide {c} channels")
    xg = x.reshape(b, groups, c // groups, t, h, w)
    mean = xg.mean(dim=(2, 4, 5), keepdim=True)
    var = xg.var(dim=(2, 4, 5), keepdim=True, unbiased=False)
    normed = ((xg - mean) / torch.sqrt(var + eps)).reshape(b, c, t, h, w)
    return normed * gamma.view(1, c, 1, 1, 1) + beta.view(1, c, 1, 1, 1)


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, gn_groups: int):
        super().__init__()
        if out_channels % gn_groups != 0:
            raise ConfigError(
                f"{gn_groups} groups do not divide {out_channels} channels"
            )
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=0)
        self.gn_groups = gn_groups
        self.gn_gamma = nn.Parameter(torch.ones(out_channels))
        self.gn_beta = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv.in_channels:
            raise ConfigError(
                f"block expects {self.conv.in_channels} channels, got {x.shape[1]}"
            )
        # SAME in space (zeros) and time (edge replication).
        x = F.pad(x, (1, 1, 1, 1, 0, 0))
        x = F.pad(x, (0, 0, 0, 0, 1, 1), mode="replicate")
        x = self.conv(x)
        x = group_norm_per_frame(x, self.gn_groups, self.gn_gamma, self.gn_beta)
        x = F.relu(x)
        return F.max_pool3d(x, kernel_size=(1, 2, 2))


class VideoFrontend(nn.Module):
    """Thumbnails (B, T, H, W, 3) in [0, 1] -> embeddings (B, T, dim)."""

    def __init__(self, config: VideoFrontendConfig):
        super().__init__()
        self.config = config
        blocks = []
        prev = config.in_channels
        for ch in config.block_channels:
            blocks.append(ConvBlock(prev, ch, config.gn_groups))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.embed_norm = nn.LayerNorm(config.embedding_dim, eps=GN_EPS)

    def forward(self, thumbnails: torch.Tensor) -> torch.Tensor:
        if thumbnails.ndim != 5 or thumbnails.shape[-1] != self.config.in_channels:
            raise ConfigError("expected thumbnails shaped (B, T, H, W, C)")
        x = thumbnails.permute(0, 4, 1, 2, 3)       # (B, C, T, H, W)
        for block in self.blocks:
            x = block(x)
        x = x.mean(dim=(3, 4))                      # global spatial average
        return self.embed_norm(x.transpose(1, 2))   # (B, T, dim)


def embed_clip(clip: VideoClip, frontend: VideoFrontend) -> VideoEmbeddingSequence:
    frames = torch.as_tensor(
        np.ascontiguousarray(clip.frames),
        dtype=next(frontend.parameters()).dtype,
    )
    with torch.no_grad():
        emb = frontend(frames.unsqueeze(0))[0]
    return VideoEmbeddingSequence(emb.cpu().numpy(), clip.fps)


def smooth_landmarks(track: np.ndarray, sigma_s: float, fps: float) -> np.ndarray:
    """Temporal Gaussian smoothing, truncated at 3 sigma, edge renormalized."""
    if sigma_s <= 0:
        raise ValueError("sigma must be positive")
    track = np.asarray(track, dtype=np.float64)
    t_len = track.shape[0]
    sigma = sigma_s * float(fps)                   # in frames
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    out = np.empty_like(track)
    for t in range(t_len):
        lo = max(0, t - radius)
        hi = min(t_len, t + radius + 1)
        w = kernel[lo - t + radius : hi - t + radius]
        out[t] = np.tensordot(w, track[lo:hi], axes=(0, 0)) / w.sum()
    return out
