"""Stage 1: decoupled multimodal tokenizer.

Each modality encoder emits a private and a shared half.  Private halves are
quantized against a per-modality codebook.  Shared halves are first grouped
into EEG-length windows by temporal alignment, then quantized against one
codebook common to all modalities.  Decoders rebuild each modality from its
(private code, shared code) pair.  Cross-modal alignment expands the EEG
shared codes so the other modalities can be rebuilt from them too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .data import Batch, ModalityBatch, PatchDataset
from .encoder import EncoderConfig, ModalityEncoder
from .sigproc import SPECS, alignment_factor
from .training import EpochRecord, OptimConfig, make_optimizer, perplexity, run_epochs, trainable


@dataclass
class TokenizerConfig:
    encoders: dict[str, EncoderConfig]
    codebook_size: int = 128
    code_dim: int = 16
    decoder_layers: int = 3
    decay: float = 0.99
    eps: float = 1e-5
    alpha1: float = 1.0
    alpha2: float = 0.1
    cross_modal: bool = True
    disentangle: bool = True
    shared_codebook: bool = True
    dead_code_epochs: int = 2

    @property
    def modalities(self) -> list[str]:
        return list(self.encoders)


# ---------------------------------------------------------------------------
# codebooks


@torch.no_grad()
def quantize(emb: torch.Tensor, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest unit-norm code by cosine similarity.

    Returns (codes[index], index).  Similarities are computed in float64 so
    near-ties resolve the same way as an exhaustive distance search.
    """
    e = nx.l2_normalize(emb.double())
    sims = e @ nx.l2_normalize(codes.double()).T
    index = sims.argmax(-1)
    return codes[index], index


@torch.no_grad()
def ema_update(codes, cluster_size, code_sum, emb, index, decay: float = 0.99, eps: float = 1e-5):
    """In-place EMA codebook update from unit-normalised embeddings ``emb``
    assigned to ``index``.  Codes with no assignments keep their direction."""
    k = codes.shape[0]
    e = nx.l2_normalize(emb.reshape(-1, codes.shape[1])).to(codes.dtype)
    index = index.reshape(-1)
    counts = torch.bincount(index, minlength=k).to(codes.dtype)
    sums = torch.zeros_like(code_sum).index_add_(0, index, e)
    cluster_size.mul_(decay).add_(counts, alpha=1 - decay)
    code_sum.mul_(decay).add_(sums, alpha=1 - decay)
    total = cluster_size.sum().clamp_min(eps)
    smoothed = (cluster_size + eps) * (1 + k * eps / total)
    codes.copy_(nx.l2_normalize(code_sum / smoothed.unsqueeze(1)))
    return counts


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.decay, self.eps = decay, eps
        self.register_buffer("codes", torch.zeros(size, dim))
        self.register_buffer("cluster_size", torch.zeros(size))
        self.register_buffer("code_sum", torch.zeros(size, dim))
        self.register_buffer("idle_epochs", torch.zeros(size))
        self.register_buffer("usage", torch.zeros(size))
        self._pool: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @torch.no_grad()
    def reset(self, rng: np.random.Generator) -> None:
        v = torch.from_numpy(rng.standard_normal(tuple(self.codes.shape))).to(self.codes.dtype)
        self.codes.copy_(nx.l2_normalize(v))
        self.code_sum.copy_(self.codes)
        self.cluster_size.zero_()
        self.idle_epochs.zero_()
        self.usage.zero_()

    def lookup(self, emb):
        return quantize(emb, self.codes)

    @torch.no_grad()
    def update(self, emb, index) -> None:
        counts = ema_update(self.codes, self.cluster_size, self.code_sum, emb, index, self.decay, self.eps)
        self.usage.add_(counts)
        self._pool = emb.detach().reshape(-1, self.codes.shape[1])

    @torch.no_grad()
    def end_epoch(self, rng: np.random.Generator, patience: int = 2) -> int:
        """Re-seeds codes unused for ``patience`` whole epochs from recent
        embeddings.  Returns the number of revived codes."""
        self.idle_epochs.copy_(torch.where(self.usage > 0, torch.zeros_like(self.idle_epochs), self.idle_epochs + 1))
        self.usage.zero_()
        dead = torch.nonzero(self.idle_epochs >= patience).flatten()
        if dead.numel() == 0 or self._pool is None or self._pool.shape[0] == 0:
            return 0
        pick = torch.from_numpy(rng.integers(0, self._pool.shape[0], size=dead.numel()))
        fresh = nx.l2_normalize(self._pool[pick]).to(self.codes.dtype)
        self.codes[dead] = fresh
        self.code_sum[dead] = fresh
        self.cluster_size[dead] = 1.0
        self.idle_epochs[dead] = 0
        return int(dead.numel())


# ---------------------------------------------------------------------------
# alignment


class TemporalAlign(nn.Module):
    """A single learned query attends over each group of ``factor``
    consecutive same-channel tokens, giving one token per EEG-length window."""

    def __init__(self, dim: int, factor: int):
        super().__init__()
        self.factor = factor
        self.query = nn.Parameter(torch.zeros(1, dim))
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)

    def forward(self, z: torch.Tensor, channels: int) -> torch.Tensor:
        """(B, C*T, dim) -> (B, C, T/factor, dim)."""
        b, n, d = z.shape
        if n % channels or (n // channels) % self.factor:
            raise nx.ContractError(
                f"temporal_align: {n} tokens over {channels} channels not divisible into groups of {self.factor}"
            )
        groups = z.reshape(b, channels, n // channels // self.factor, self.factor, d)
        out = nx.attention(self.query, self.key(groups), self.value(groups))
        return out.squeeze(-2)


class CrossModalAlign(nn.Module):
    """Expands one EEG-window code into ``factor`` tokens: learned queries
    attend over the window code, with the queries added back residually."""

    def __init__(self, dim: int, factor: int):
        super().__init__()
        self.factor = factor
        self.queries = nn.Parameter(torch.zeros(factor, dim))
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        """(B, W, dim) -> (B, W*factor, dim)."""
        b, w, d = codes.shape
        kv = codes.unsqueeze(-2)
        out = self.queries + nx.attention(self.queries, self.key(kv), self.value(kv))
        return out.reshape(b, w * self.factor, d)


class Decoder(nn.Module):
    def __init__(self, code_dim: int, hidden: int, heads: int, mlp: int, layers: int, width: int):
        super().__init__()
        self.inp = nn.Linear(2 * code_dim, hidden)
        self.blocks = nn.ModuleList(nx.TransformerBlock(hidden, heads, mlp) for _ in range(layers))
        self.norm = nx.RMSNorm(hidden)
        self.head = nn.Linear(hidden, width)

    def forward(self, private_code, shared_code):
        x = self.inp(nx.concat([private_code, shared_code], -1))
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))


# ---------------------------------------------------------------------------
# model


@dataclass
class ModalityOutput:
    z_private: torch.Tensor  # (B, N, h)
    z_shared: torch.Tensor  # (B, N, h)
    e_private: torch.Tensor  # (B, N, D), unit norm
    private_index: torch.Tensor  # (B, N)
    private_code: torch.Tensor  # (B, N, D), straight-through
    e_shared: torch.Tensor | None = None  # (B, C, W, D), unit norm
    shared_index: torch.Tensor | None = None  # (B, C, W)
    shared_code: torch.Tensor | None = None  # (B, C, W, D), straight-through
    recon: torch.Tensor | None = None
    cross_recon: torch.Tensor | None = None


@dataclass
class TokenizerLosses:
    total: torch.Tensor
    codebook: torch.Tensor
    cross_modal: torch.Tensor
    disentangle: torch.Tensor
    vq: torch.Tensor
    terms: dict[str, torch.Tensor] = field(default_factory=dict)

    def floats(self) -> dict[str, float]:
        out = {
            "L_T": self.total.item(),
            "L_CB": self.codebook.item(),
            "L_CR": self.cross_modal.item(),
            "L_D": self.disentangle.item(),
        }
        out.update({k: v.item() for k, v in self.terms.items()})
        return out


def disentangle_loss(z_private: torch.Tensor, z_shared: torch.Tensor) -> torch.Tensor:
    """Mean squared cosine between the two halves: zero when orthogonal, one
    when parallel or anti-parallel."""
    return nx.cosine_similarity(z_private, z_shared).pow(2).mean()


def broadcast_windows(codes: torch.Tensor, factor: int) -> torch.Tensor:
    """(B, C, W, D) window codes -> (B, C*W*factor, D), one per patch token."""
    b, c, w, d = codes.shape
    return codes.repeat_interleave(factor, dim=2).reshape(b, c * w * factor, d)


def tile_channels(tokens: torch.Tensor, channels: int) -> torch.Tensor:
    """(B, T, D) per-time tokens -> (B, C*T, D) channel-major."""
    b, t, d = tokens.shape
    return tokens.unsqueeze(1).expand(b, channels, t, d).reshape(b, channels * t, d)


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        D, K = cfg.code_dim, cfg.codebook_size
        self.factors = {m: alignment_factor(m) for m in cfg.modalities}
        self.encoders = nn.ModuleDict({m: ModalityEncoder(c) for m, c in cfg.encoders.items()})
        self.private_proj = nn.ModuleDict({m: nn.Linear(c.hidden // 2, D) for m, c in cfg.encoders.items()})
        self.private_books = nn.ModuleDict({m: Codebook(K, D, cfg.decay, cfg.eps) for m in cfg.modalities})
        self.decoders = nn.ModuleDict(
            {
                m: Decoder(D, c.hidden, c.heads, c.mlp, cfg.decoder_layers, SPECS[m].target_width)
                for m, c in cfg.encoders.items()
            }
        )
        if cfg.shared_codebook:
            self.align = nn.ModuleDict(
                {m: TemporalAlign(c.hidden // 2, self.factors[m]) for m, c in cfg.encoders.items()}
            )
            self.shared_proj = nn.ModuleDict({m: nn.Linear(c.hidden // 2, D) for m, c in cfg.encoders.items()})
            self.shared_book = Codebook(K, D, cfg.decay, cfg.eps)
            if self.uses_cross_modal:
                self.cross_align = nn.ModuleDict(
                    {m: CrossModalAlign(D, self.factors[m]) for m in cfg.modalities if m != "eeg"}
                )

    @property
    def uses_cross_modal(self) -> bool:
        c = self.cfg
        return c.shared_codebook and c.cross_modal and "eeg" in c.modalities and len(c.modalities) > 1

    def initialize(self, streams: nx.Streams) -> "Tokenizer":
        nx.init_parameters(self, streams, "tokenizer.")
        for name, book in self.named_modules():
            if isinstance(book, Codebook):
                book.reset(streams.numpy("codebook/" + name))
        return self

    @torch.no_grad()
    def fit_output_bias(self, dataset: PatchDataset) -> None:
        """Start each decoder at the mean training target.  Without this the
        Fourier-amplitude decoders first learn the mean spectrum by squeezing
        all encoder outputs together, and the codebook collapses with them."""
        for m, dec in self.decoders.items():
            mean = dataset.arrays[m].targets.mean(axis=(0, 1), dtype=np.float64)
            dec.head.bias.copy_(torch.from_numpy(mean))

    def codebooks(self) -> dict[str, Codebook]:
        out = {m: b for m, b in self.private_books.items()}
        if self.cfg.shared_codebook:
            out["shared"] = self.shared_book
        return out

    # -- forward pieces -------------------------------------------------

    def tokenize(self, m: str, mb: ModalityBatch) -> ModalityOutput:
        zp, zs = self.encoders[m].encode(mb.patches, mb.channel, mb.time)
        ep = nx.l2_normalize(self.private_proj[m](zp))
        pcode, pidx = self.private_books[m].lookup(ep)
        out = ModalityOutput(zp, zs, ep, pidx, nx.straight_through(pcode, ep))
        if self.cfg.shared_codebook:
            es = nx.l2_normalize(self.shared_proj[m](self.align[m](zs, mb.channels)))
            scode, sidx = self.shared_book.lookup(es)
            out.e_shared, out.shared_index = es, sidx
            out.shared_code = nx.straight_through(scode, es)
        return out

    def shared_slots(self, m: str, out: ModalityOutput) -> torch.Tensor:
        if out.shared_code is None:
            return torch.zeros_like(out.private_code)
        return broadcast_windows(out.shared_code, self.factors[m])

    def anchor_codes(self, eeg: ModalityOutput) -> torch.Tensor:
        """Channel-averaged EEG shared codes, one unit vector per window: (B, W, D)."""
        return nx.l2_normalize(eeg.shared_code.mean(1))

    def cross_slots(self, m: str, anchor: torch.Tensor, channels: int) -> torch.Tensor:
        expanded = nx.l2_normalize(self.cross_align[m](anchor))
        return tile_channels(expanded, channels)

    def forward(self, batch: Batch) -> dict[str, ModalityOutput]:
        outs = {m: self.tokenize(m, mb) for m, mb in batch.modalities.items()}
        for m, out in outs.items():
            out.recon = self.decoders[m](out.private_code, self.shared_slots(m, out))
        if self.uses_cross_modal and "eeg" in outs:
            anchor = self.anchor_codes(outs["eeg"])
            for m, out in outs.items():
                if m == "eeg":
                    continue
                slots = self.cross_slots(m, anchor, batch.modalities[m].channels)
                out.cross_recon = self.decoders[m](out.private_code, slots)
        return outs

    def losses(self, batch: Batch, outs: dict[str, ModalityOutput]) -> TokenizerLosses:
        cfg = self.cfg
        zero = torch.zeros(())
        terms: dict[str, torch.Tensor] = {}
        cb = zero
        vq = zero
        for m, out in outs.items():
            target = batch.modalities[m].targets
            terms[f"recon_{m}"] = nx.mse(out.recon, target)
            code = self.private_books[m].codes[out.private_index]
            terms[f"commit_{m}"] = nx.mse(out.e_private, nx.stop_gradient(code))
            vq = vq + nx.mse(nx.stop_gradient(out.e_private), code)
            cb = cb + terms[f"recon_{m}"] + terms[f"commit_{m}"]
        if cfg.shared_codebook:
            es = torch.cat([o.e_shared.reshape(-1, cfg.code_dim) for o in outs.values()])
            idx = torch.cat([o.shared_index.reshape(-1) for o in outs.values()])
            code = self.shared_book.codes[idx]
            terms["commit_shared"] = nx.mse(es, nx.stop_gradient(code))
            vq = vq + nx.mse(nx.stop_gradient(es), code)
            cb = cb + terms["commit_shared"]
        cr = zero
        for m, out in outs.items():
            if out.cross_recon is not None:
                terms[f"cross_{m}"] = nx.mse(out.cross_recon, batch.modalities[m].targets)
                cr = cr + terms[f"cross_{m}"]
        dis = zero
        for m, out in outs.items():
            terms[f"disent_{m}"] = disentangle_loss(out.z_private, out.z_shared)
            dis = dis + terms[f"disent_{m}"]
        total = cb
        if self.uses_cross_modal and cfg.alpha1:
            total = total + cfg.alpha1 * cr
        if cfg.disentangle and cfg.alpha2:
            total = total + cfg.alpha2 * dis
        return TokenizerLosses(total, cb, cr, dis, vq, terms)

    @torch.no_grad()
    def update_codebooks(self, outs: dict[str, ModalityOutput]) -> None:
        for m, out in outs.items():
            self.private_books[m].update(out.e_private, out.private_index)
        if self.cfg.shared_codebook:
            es = torch.cat([o.e_shared.reshape(-1, self.cfg.code_dim) for o in outs.values()])
            idx = torch.cat([o.shared_index.reshape(-1) for o in outs.values()])
            self.shared_book.update(es, idx)

    @torch.no_grad()
    def code_indices(self, batch: Batch) -> dict[str, dict[str, torch.Tensor]]:
        """Private index per patch and shared index per window for each modality."""
        out = {}
        for m, mb in batch.modalities.items():
            o = self.tokenize(m, mb)
            out[m] = {"private": o.private_index, "shared": o.shared_index}
        return out


# ---------------------------------------------------------------------------
# training / evaluation


def train_tokenizer(
    model: Tokenizer,
    dataset: PatchDataset,
    optim: OptimConfig,
    streams: nx.Streams,
    opt_state: nx.OptimizerState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> list[EpochRecord]:
    params = trainable(model)
    if opt_state is None:
        model.fit_output_bias(dataset)
    opt = opt_state or make_optimizer(optim, dataset.steps_per_epoch(optim.batch_size))
    model.train()

    def step(batch, t):
        outs = model(batch)
        losses = model.losses(batch, outs)
        return losses.total, losses.floats(), outs

    def epoch_end(rec: EpochRecord):
        for name, book in model.codebooks().items():
            rec.metrics[f"revived_{name}"] = book.end_epoch(streams.numpy("revive/" + name, rec.epoch))
        if on_epoch is not None:
            on_epoch(rec)

    return run_epochs(
        dataset, params, step, optim, streams, opt, start_epoch, after_step=model.update_codebooks, on_epoch=epoch_end
    )


@torch.no_grad()
def evaluate_tokenizer(model: Tokenizer, dataset: PatchDataset, batch_size: int = 64) -> dict[str, float]:
    """Held-out losses and codebook perplexities."""
    sums: dict[str, float] = {}
    idx: dict[str, list[np.ndarray]] = {}
    n = 0
    for batch in dataset.batches(batch_size):
        outs = model(batch)
        for k, v in model.losses(batch, outs).floats().items():
            sums[k] = sums.get(k, 0.0) + v * len(batch)
        for m, o in outs.items():
            idx.setdefault(m, []).append(o.private_index.numpy())
            if o.shared_index is not None:
                idx.setdefault("shared", []).append(o.shared_index.numpy().ravel())
        n += len(batch)
    out = {k: v / n for k, v in sums.items()}
    for name, chunks in idx.items():
        out[f"perplexity_{name}"] = perplexity(np.concatenate([c.ravel() for c in chunks]), model.cfg.codebook_size)
    return out


@torch.no_grad()
def cross_modal_error(model: Tokenizer, batch: Batch, shuffle: np.random.Generator | None = None) -> float:
    """Mean cross-modal reconstruction error over the non-EEG modalities.

    With ``shuffle``, the EEG anchor codes are permuted across all
    (sample, window) slots of the batch before expansion: a control that
    breaks the pairing between the anchor and the rebuilt signal.
    """
    outs = {m: model.tokenize(m, mb) for m, mb in batch.modalities.items()}
    anchor = model.anchor_codes(outs["eeg"])
    if shuffle is not None:
        b, w, d = anchor.shape
        perm = torch.from_numpy(shuffle.permutation(b * w))
        anchor = anchor.reshape(b * w, d)[perm].reshape(b, w, d)
    errs = []
    for m, o in outs.items():
        if m == "eeg":
            continue
        slots = model.cross_slots(m, anchor, batch.modalities[m].channels)
        errs.append(nx.mse(model.decoders[m](o.private_code, slots), batch.modalities[m].targets).item())
    return float(np.mean(errs))
