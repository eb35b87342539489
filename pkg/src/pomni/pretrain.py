"""Stage 2: masked signal modelling against a frozen tokenizer.

Whole patches are masked at random; the encoder sees a learned mask token in
their place and two heads predict the tokenizer's private and shared code
indices at the masked positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .data import Batch, PatchDataset
from .encoder import EncoderConfig, ModalityEncoder
from .tokenizer import Tokenizer
from .training import EpochRecord, OptimConfig, make_optimizer, run_epochs, trainable

DEFAULT_MASK_RATIOS = {"eeg": 0.5, "emg": 0.5, "eog": 0.7, "ecg": 0.7}


@dataclass
class PretrainConfig:
    encoders: dict[str, EncoderConfig]
    codebook_size: int = 128
    mask_ratios: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MASK_RATIOS))
    shared_codebook: bool = True
    warm_start: bool = False

    @property
    def modalities(self) -> list[str]:
        return list(self.encoders)


def mask_count(ratio: float, n: int) -> int:
    """round(ratio * n) (half up), clamped to [1, n - 1]."""
    if n < 2:
        raise ValueError(f"need at least 2 patches to mask, got {n}")
    return int(min(max(math.floor(ratio * n + 0.5), 1), n - 1))


def sample_mask(rng: np.random.Generator, batch: int, n: int, ratio: float) -> torch.Tensor:
    """(batch, n) boolean mask, uniform without replacement per row."""
    k = mask_count(ratio, n)
    order = np.argsort(rng.random((batch, n)), axis=1)
    mask = np.zeros((batch, n), dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return torch.from_numpy(mask)


@torch.no_grad()
def compute_targets(tokenizer: Tokenizer, batch: Batch) -> dict[str, tuple[torch.Tensor, torch.Tensor | None]]:
    """Per-patch (private, shared) target indices; each window's shared index
    is repeated over the patches it covers."""
    tokenizer.eval()
    out = {}
    for m, idx in tokenizer.code_indices(batch).items():
        shared = idx["shared"]
        if shared is not None:
            b = shared.shape[0]
            shared = shared.repeat_interleave(tokenizer.factors[m], dim=2).reshape(b, -1)
        out[m] = (idx["private"], shared)
    return out


def masked_nll(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Summed negative log-likelihood over masked positions only."""
    sel = logits[mask]
    return -torch.log_softmax(sel, -1).gather(-1, target[mask].unsqueeze(-1)).sum()


def loss_masked(logits, targets, masks) -> torch.Tensor:
    """Mean over masked positions (all modalities) of the private plus shared
    code cross-entropy.

    logits/targets: modality -> (private, shared-or-None); masks: modality -> (B, N).
    """
    total = torch.zeros(())
    count = 0
    for m, mask in masks.items():
        for lg, tg in zip(logits[m], targets[m]):
            if lg is not None and tg is not None:
                total = total + masked_nll(lg, tg, mask)
        count += int(mask.sum())
    return total / max(count, 1)


class MaskedModel(nn.Module):
    def __init__(self, cfg: PretrainConfig):
        super().__init__()
        self.cfg = cfg
        K = cfg.codebook_size
        self.encoders = nn.ModuleDict({m: ModalityEncoder(c) for m, c in cfg.encoders.items()})
        self.mask_tokens = nn.ParameterDict({m: nn.Parameter(torch.zeros(1, c.hidden)) for m, c in cfg.encoders.items()})
        self.private_heads = nn.ModuleDict({m: nn.Linear(c.hidden, K) for m, c in cfg.encoders.items()})
        if cfg.shared_codebook:
            self.shared_heads = nn.ModuleDict({m: nn.Linear(c.hidden, K) for m, c in cfg.encoders.items()})

    def initialize(self, streams: nx.Streams, tokenizer: Tokenizer | None = None) -> "MaskedModel":
        nx.init_parameters(self, streams, "pretrain.")
        if self.cfg.warm_start and tokenizer is not None:
            for m, enc in self.encoders.items():
                enc.load_state_dict(tokenizer.encoders[m].state_dict())
        return self

    def forward(self, batch: Batch, masks: dict[str, torch.Tensor]):
        out = {}
        for m, mb in batch.modalities.items():
            z = self.encoders[m](mb.patches, mb.channel, mb.time, masks.get(m), self.mask_tokens[m])
            shared = self.shared_heads[m](z) if self.cfg.shared_codebook else None
            out[m] = (self.private_heads[m](z), shared)
        return out

    def draw_masks(self, batch: Batch, rng: np.random.Generator) -> dict[str, torch.Tensor]:
        return {
            m: sample_mask(rng, len(batch), mb.patches.shape[1], self.cfg.mask_ratios[m])
            for m, mb in batch.modalities.items()
        }


def masked_accuracy(logits, targets, masks) -> dict[str, float]:
    hits = {"private": 0, "shared": 0}
    total = 0
    for m, mask in masks.items():
        for key, lg, tg in zip(("private", "shared"), logits[m], targets[m]):
            if lg is not None and tg is not None:
                hits[key] += int((lg[mask].argmax(-1) == tg[mask]).sum())
        total += int(mask.sum())
    return {k: v / max(total, 1) for k, v in hits.items()}


def pretrain_run(
    model: MaskedModel,
    tokenizer: Tokenizer,
    dataset: PatchDataset,
    optim: OptimConfig,
    streams: nx.Streams,
    opt_state: nx.OptimizerState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> list[EpochRecord]:
    for p in tokenizer.parameters():
        p.requires_grad_(False)
    tokenizer.eval()
    model.train()
    params = trainable(model)
    opt = opt_state or make_optimizer(optim, dataset.steps_per_epoch(optim.batch_size))

    def step(batch, t):
        targets = compute_targets(tokenizer, batch)
        masks = model.draw_masks(batch, streams.numpy("mask", t))
        logits = model(batch, masks)
        loss = loss_masked(logits, targets, masks)
        acc = masked_accuracy(logits, targets, masks)
        return loss, {"L_M": loss.item(), **{f"acc_{k}": v for k, v in acc.items()}}, None

    return run_epochs(dataset, params, step, optim, streams, opt, start_epoch, on_epoch=on_epoch)


@torch.no_grad()
def evaluate_pretrain(model: MaskedModel, tokenizer: Tokenizer, dataset: PatchDataset, streams: nx.Streams, batch_size=64):
    model.eval()
    loss_sum, n = 0.0, 0
    hits = {"private": 0.0, "shared": 0.0}
    for i, batch in enumerate(dataset.batches(batch_size)):
        targets = compute_targets(tokenizer, batch)
        masks = model.draw_masks(batch, streams.numpy("eval-mask", i))
        logits = model(batch, masks)
        loss_sum += loss_masked(logits, targets, masks).item() * len(batch)
        for k, v in masked_accuracy(logits, targets, masks).items():
            hits[k] += v * len(batch)
        n += len(batch)
    model.train()
    return {"L_M": loss_sum / n, **{f"acc_{k}": v / n for k, v in hits.items()}}
