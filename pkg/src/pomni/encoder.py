"""Per-modality patch encoder with a private/shared output split."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import numerics as nx

CONV_IN = (1, 8, 8)
CONV_OUT = (16, 16, 16)
CONV_KERNEL = (15, 3, 3)
CONV_STRIDE = (8, 1, 1)
CONV_PAD = (7, 1, 1)


class EncoderConfigError(ValueError):
    pass


def conv_length(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class EncoderConfig:
    modality: str
    patch: int
    hidden: int = 32
    layers: int = 2
    heads: int = 4
    mlp: int = 128
    max_channels: int = 64
    max_time: int = 64

    def __post_init__(self):
        if self.hidden % 2:
            raise EncoderConfigError(f"hidden size {self.hidden} must be even")
        if self.hidden % self.heads:
            raise EncoderConfigError(f"{self.heads} heads do not divide hidden size {self.hidden}")

    @property
    def conv_lengths(self) -> list[int]:
        n, out = self.patch, [self.patch]
        for k, s, p in zip(CONV_KERNEL, CONV_STRIDE, CONV_PAD):
            n = conv_length(n, k, s, p)
            out.append(n)
        return out


class TemporalEncoder(nn.Module):
    """Three conv layers, each followed by GroupNorm(4) and GELU, then a linear
    projection of the flattened feature map to the hidden size.

    Layer i has ``CONV_IN[i]`` input channels per group; the two inner layers
    are grouped so that 16 channels enter as 2 groups of 8.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch = cfg.patch
        convs, norms = [], []
        prev = 1
        for cin, cout, k, s, p in zip(CONV_IN, CONV_OUT, CONV_KERNEL, CONV_STRIDE, CONV_PAD):
            groups = prev // cin
            convs.append(nn.Conv1d(prev, cout, k, stride=s, padding=p, groups=groups))
            norms.append(nn.GroupNorm(4, cout))
            prev = cout
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.proj = nn.Linear(prev * cfg.conv_lengths[-1], cfg.hidden)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(..., P) -> (..., hidden)."""
        if patches.shape[-1] != self.patch:
            raise nx.ContractError(f"temporal_encode: expected patch length {self.patch}, got {tuple(patches.shape)}")
        lead = patches.shape[:-1]
        x = patches.reshape(-1, 1, self.patch)
        for conv, norm in zip(self.convs, self.norms):
            x = nx.gelu(nx.group_norm(conv(x), 4, norm.weight, norm.bias))
        return self.proj(x.flatten(1)).reshape(*lead, -1)


class ModalityEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, experts: int = 0):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalEncoder(cfg)
        self.spatial_emb = nn.Parameter(torch.zeros(cfg.max_channels, cfg.hidden))
        self.time_emb = nn.Parameter(torch.zeros(cfg.max_time, cfg.hidden))
        self.blocks = nn.ModuleList(nx.TransformerBlock(cfg.hidden, cfg.heads, cfg.mlp) for _ in range(cfg.layers))
        self.norm = nx.RMSNorm(cfg.hidden)

    def embed(self, patches, channel, time, mask=None, mask_token=None):
        """Temporal features plus spatial/temporal embeddings.  Where ``mask``
        is true the temporal feature is replaced by ``mask_token``."""
        if int(channel.max()) >= self.cfg.max_channels or int(time.max()) >= self.cfg.max_time:
            raise EncoderConfigError(
                f"{self.cfg.modality}: channel/time index exceeds embedding tables "
                f"({self.cfg.max_channels}, {self.cfg.max_time})"
            )
        tokens = self.temporal(patches)
        if mask is not None:
            tokens = torch.where(mask.unsqueeze(-1), mask_token.expand_as(tokens), tokens)
        return tokens + self.spatial_emb[channel] + self.time_emb[time]

    def forward(self, patches, channel, time, mask=None, mask_token=None):
        """(B, N, P) patches -> (B, N, hidden) tokens."""
        x = self.embed(patches, channel, time, mask, mask_token)
        for block in self.blocks:
            x = block(x)
        return self.norm(x) if self.blocks else x

    def encode(self, patches, channel, time, mask=None, mask_token=None):
        """Returns (private, shared) halves, each (B, N, hidden/2)."""
        h = self.cfg.hidden // 2
        z = self.forward(patches, channel, time, mask, mask_token)
        return nx.split(z, (h, h))
