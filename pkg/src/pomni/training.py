"""Epoch loop shared by the three training stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .data import Batch, PatchDataset


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 1
    epochs: int = 5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 32
    grad_clip: float = 0.0  # 0 disables


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    terms: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)


StepFn = Callable[[Batch, int], tuple[torch.Tensor, dict[str, float], object]]


def make_optimizer(cfg: OptimConfig, steps_per_epoch: int) -> nx.OptimizerState:
    return nx.OptimizerState(
        peak_lr=cfg.peak_lr,
        min_lr=cfg.min_lr,
        warmup_steps=cfg.warmup_epochs * steps_per_epoch,
        total_steps=cfg.epochs * steps_per_epoch,
        weight_decay=cfg.weight_decay,
        betas=tuple(cfg.betas),
    )


def run_epochs(
    dataset: PatchDataset,
    params: list[tuple[str, torch.nn.Parameter]],
    step_fn: StepFn,
    cfg: OptimConfig,
    streams: nx.Streams,
    opt: nx.OptimizerState,
    start_epoch: int = 0,
    after_step: Callable[[object], None] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    modalities=None,
) -> list[EpochRecord]:
    """Runs epochs ``start_epoch .. cfg.epochs-1``.

    The batch order of epoch e depends only on (seed, e), so a resumed run
    replays exactly what an uninterrupted run would have done.
    """
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        rng = streams.numpy("shuffle", epoch)
        total, count = 0.0, 0
        sums: dict[str, float] = {}
        for batch in dataset.batches(cfg.batch_size, rng, modalities):
            for _, p in params:
                p.grad = None
            loss, terms, aux = step_fn(batch, opt.step)
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {opt.step}")
            loss.backward()
            if cfg.grad_clip > 0:
                nx.clip_grad_norm(params, cfg.grad_clip)
            nx.adamw_step(params, opt)
            if after_step is not None:
                after_step(aux)
            n = len(batch)
            total += loss.item() * n
            count += n
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * n
        record = EpochRecord(epoch, total / count, {k: v / count for k, v in sums.items()})
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history


def trainable(module: torch.nn.Module, prefix: str = "") -> list[tuple[str, torch.nn.Parameter]]:
    return [(prefix + n, p) for n, p in module.named_parameters() if p.requires_grad]


def optimizer_tensors(opt: nx.OptimizerState) -> dict[str, torch.Tensor]:
    out = {f"optim.m.{k}": v for k, v in opt.exp_avg.items()}
    out.update({f"optim.v.{k}": v for k, v in opt.exp_avg_sq.items()})
    out["optim.step"] = torch.tensor([float(opt.step)])
    return out


def restore_optimizer(opt: nx.OptimizerState, tensors: dict[str, torch.Tensor]) -> None:
    for k, v in tensors.items():
        if k.startswith("optim.m."):
            opt.exp_avg[k[len("optim.m.") :]] = v.clone()
        elif k.startswith("optim.v."):
            opt.exp_avg_sq[k[len("optim.v.") :]] = v.clone()
    opt.step = int(tensors["optim.step"].item())


def perplexity(indices, size: int) -> float:
    counts = np.bincount(np.asarray(indices).ravel(), minlength=size).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))
