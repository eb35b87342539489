"""Stage 3: resilient fine-tuning with prototype alignment.

Each modality's encoder output is resampled to a common n x d grid
(homogeneous representation mapping), passed through one shared transformer
block and collapsed to a single d-vector by a per-modality aggregator.  The
main prediction is made from the mean of those vectors over whichever
modalities are present, so any non-empty subset can be evaluated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from . import numerics as nx
from .data import Batch, PatchDataset
from .encoder import EncoderConfig, ModalityEncoder
from .training import EpochRecord, OptimConfig, make_optimizer, run_epochs, trainable

TASKS = ("multiclass", "binary", "regression")


class SubsetError(ValueError):
    pass


@dataclass
class LossWeights:
    main: float = 0.5
    align: float = 1.0
    spec: dict[str, float] = field(default_factory=dict)  # default 0.5 per modality

    def spec_weight(self, m: str) -> float:
        return self.spec.get(m, 0.5)

    def validate(self) -> None:
        if self.main < 0 or self.align < 0 or any(v < 0 for v in self.spec.values()):
            raise ValueError("loss weights must be non-negative")


@dataclass
class FinetuneConfig:
    encoders: dict[str, EncoderConfig]
    task: str = "multiclass"
    outputs: int = 3  # classes, or regression dimension
    length: int = 16  # n
    width: int = 32  # d
    heads: int = 4
    mlp: int = 128
    prototypes: int = 0  # 0 -> one per class (16 for regression)
    experts: int = 0  # >0 enables the mixture-of-experts feed-forward in the fuser
    weights: LossWeights = field(default_factory=LossWeights)
    label_smoothing: float = 0.1
    freeze_encoders: bool = False
    prototype_align: bool = True
    spec_loss: bool = True

    @property
    def modalities(self) -> list[str]:
        return list(self.encoders)

    @property
    def head_width(self) -> int:
        return 1 if self.task == "binary" else self.outputs

    @property
    def prototype_count(self) -> int:
        if self.prototypes:
            return self.prototypes
        if self.task == "regression":
            return 16
        return 2 if self.task == "binary" else self.outputs


class LengthMapping(nn.Module):
    """softmax(H(z)) over the input-token axis gives n convex combinations of
    the input tokens; a linear map then sets the width to d."""

    def __init__(self, dim_in: int, length: int, width: int):
        super().__init__()
        self.head = nn.Linear(dim_in, length)
        self.norm = nn.LayerNorm(length)
        self.embed = nn.Linear(dim_in, width)

    def weights(self, z):
        """(B, n_j, d_j) -> (B, n_j, n); columns sum to one."""
        return nx.softmax(self.norm(self.head(z)), dim=-2)

    def forward(self, z):
        f = nx.matmul(self.weights(z).transpose(-1, -2), z)
        return self.embed(f)


class Aggregator(nn.Module):
    """Full-length depthwise 1-D convolution: a learned weighted sum over the
    token axis for each feature."""

    def __init__(self, length: int, width: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(width, 1, length))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        """(B, n, d) -> (B, d)."""
        y = nx.conv1d(x.transpose(1, 2), self.weight, self.bias, groups=x.shape[-1])
        return y.squeeze(-1)


class FinetuneModel(nn.Module):
    def __init__(self, cfg: FinetuneConfig):
        super().__init__()
        if cfg.task not in TASKS:
            raise ValueError(f"unknown task {cfg.task!r}")
        self.cfg = cfg
        self.encoders = nn.ModuleDict({m: ModalityEncoder(c) for m, c in cfg.encoders.items()})
        self.mapping = nn.ModuleDict({m: LengthMapping(c.hidden, cfg.length, cfg.width) for m, c in cfg.encoders.items()})
        self.fuser = nx.TransformerBlock(cfg.width, cfg.heads, cfg.mlp, cfg.experts)
        self.aggregators = nn.ModuleDict({m: Aggregator(cfg.length, cfg.width) for m in cfg.modalities})
        self.main_head = nn.Linear(cfg.width, cfg.head_width)
        self.spec_heads = nn.ModuleDict({m: nn.Linear(cfg.width, cfg.head_width) for m in cfg.modalities})
        self.prototypes = nn.Parameter(torch.zeros(cfg.prototype_count, cfg.width))

    def initialize(self, streams: nx.Streams, encoder_state: dict[str, dict] | None = None) -> "FinetuneModel":
        nx.init_parameters(self, streams, "finetune.")
        with torch.no_grad():
            rng = streams.numpy("prototypes")
            self.prototypes.copy_(torch.from_numpy(rng.standard_normal(tuple(self.prototypes.shape))))
            # aggregators start as mean pooling
            for agg in self.aggregators.values():
                agg.weight.fill_(1.0 / self.cfg.length)
        if encoder_state:
            for m, state in encoder_state.items():
                if m in self.encoders:
                    self.encoders[m].load_state_dict(state)
        self.set_frozen(self.cfg.freeze_encoders)
        return self

    def set_frozen(self, frozen: bool) -> None:
        for p in self.encoders.parameters():
            p.requires_grad_(not frozen)

    def features(self, m: str, batch: Batch) -> torch.Tensor:
        mb = batch.modalities[m]
        z = self.encoders[m](mb.patches, mb.channel, mb.time)
        return self.aggregators[m](self.fuser(self.mapping[m](z)))

    def forward(self, batch: Batch, subset=None) -> dict[str, torch.Tensor]:
        """Fused feature h^j (B, d) for each modality in ``subset``."""
        subset = self.check_subset(batch, subset)
        return {m: self.features(m, batch) for m in subset}

    def check_subset(self, batch: Batch, subset) -> list[str]:
        subset = list(self.cfg.modalities if subset is None else subset)
        if not subset:
            raise SubsetError("modality subset must be non-empty")
        for m in subset:
            if m not in self.encoders:
                raise SubsetError(f"modality {m!r} was not trained")
            if m not in batch.modalities:
                raise SubsetError(f"modality {m!r} missing from sample")
        return subset

    def predict_main(self, feats: dict[str, torch.Tensor]) -> torch.Tensor:
        if not feats:
            raise SubsetError("modality subset must be non-empty")
        return self.main_head(torch.stack([feats[m] for m in sorted(feats)]).mean(0))


# ---------------------------------------------------------------------------
# losses


def task_loss(output: torch.Tensor, labels: torch.Tensor, task: str, smoothing: float) -> torch.Tensor:
    if task == "multiclass":
        return nx.cross_entropy(output, labels.long(), label_smoothing=smoothing)
    if task == "binary":
        return nx.binary_cross_entropy(output[:, 0], labels.to(output.dtype))
    return nx.mse(output, labels.to(output.dtype))


def nearest_prototype(h: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Index of the cosine-nearest prototype (no gradient)."""
    with torch.no_grad():
        return (nx.l2_normalize(h) @ nx.l2_normalize(prototypes).T).argmax(-1)


def loss_align(feats: dict[str, torch.Tensor], labels: torch.Tensor | None, prototypes: torch.Tensor, task: str):
    """Batch mean of sum over modalities of squared distance to the sample's
    prototype: its class prototype, or (regression) its nearest one."""
    total = torch.zeros(())
    for h in feats.values():
        if task == "regression":
            target = prototypes[nearest_prototype(h, prototypes)]
        else:
            target = prototypes[labels.long()]
        total = total + (h - target).pow(2).sum(-1).mean()
    return total


def loss_finetune(model: FinetuneModel, batch: Batch, feats=None) -> tuple[torch.Tensor, dict[str, float]]:
    cfg = model.cfg
    w = cfg.weights
    feats = model(batch) if feats is None else feats
    labels = batch.labels
    total = torch.zeros(())
    terms = {}
    if w.main:
        main = task_loss(model.predict_main(feats), labels, cfg.task, cfg.label_smoothing)
        total = total + w.main * main
        terms["L_main"] = main.item()
    if cfg.spec_loss:
        for m, h in feats.items():
            if w.spec_weight(m):
                spec = task_loss(model.spec_heads[m](h), labels, cfg.task, cfg.label_smoothing)
                total = total + w.spec_weight(m) * spec
                terms[f"L_spec_{m}"] = spec.item()
    if cfg.prototype_align and w.align:
        align = loss_align(feats, labels, model.prototypes, cfg.task)
        total = total + w.align * align
        terms["L_align"] = align.item()
    return total, terms


# ---------------------------------------------------------------------------
# inference / evaluation


@torch.no_grad()
def infer(model: FinetuneModel, batch: Batch, subset=None) -> torch.Tensor:
    """Main-head output from the modalities in ``subset`` only."""
    model.eval()
    return model.predict_main(model(batch, subset))


def scores_from_output(output: torch.Tensor, task: str) -> np.ndarray:
    if task == "multiclass":
        return torch.softmax(output, -1).numpy()
    if task == "binary":
        return torch.sigmoid(output[:, 0]).numpy()
    return output.numpy()


@torch.no_grad()
def evaluate(model: FinetuneModel, dataset: PatchDataset, subset=None, batch_size: int = 128) -> metrics.MetricsReport:
    outs, labels = [], []
    for batch in dataset.batches(batch_size):
        outs.append(infer(model, batch, subset))
        labels.append(batch.labels.numpy())
    scores = scores_from_output(torch.cat(outs), model.cfg.task)
    return metrics.report(model.cfg.task, scores, np.concatenate(labels))


def finetune_run(
    model: FinetuneModel,
    train: PatchDataset,
    valid: PatchDataset | None,
    optim: OptimConfig,
    streams: nx.Streams,
    opt_state: nx.OptimizerState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
    best: dict | None = None,
) -> tuple[list[EpochRecord], dict]:
    """Returns (history, best state_dict by the validation monitor metric).

    ``best`` carries the selection state over from an interrupted run.
    """
    params = trainable(model)
    opt = opt_state or make_optimizer(optim, train.steps_per_epoch(optim.batch_size))
    best = best if best is not None else {"score": -np.inf, "state": None, "epoch": -1}

    def step(batch, t):
        model.train()
        loss, terms = loss_finetune(model, batch)
        return loss, terms, None

    def epoch_end(rec: EpochRecord):
        if valid is not None:
            rep = evaluate(model, valid)
            rec.metrics.update(rep.values)
            score = rep.monitor
            if score >= best["score"]:  # ties go to the later, longer-trained state
                best.update(score=score, state=copy.deepcopy(model.state_dict()), epoch=rec.epoch)
            rec.metrics["best_epoch"] = best["epoch"]
        if on_epoch is not None:
            on_epoch(rec)

    history = run_epochs(train, params, step, optim, streams, opt, start_epoch, on_epoch=epoch_end)
    return history, best
