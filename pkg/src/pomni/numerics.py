"""Tensor substrate shared by all three training stages.

Tensors are plain ``torch.Tensor`` values and reverse-mode gradients come from
torch autograd.  This module adds what the stages need on top of that: shape
contracts on the operators, the stop-gradient / straight-through pair,
pre-norm transformer blocks, named random substreams, and an AdamW step with a
warmup + cosine schedule.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ContractError(ValueError):
    """Operator called with non-conforming shapes."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


# ---------------------------------------------------------------------------
# precision


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    torch.set_default_dtype(torch.float64 if bits == 64 else torch.float32)


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the global default dtype (64 for gradient checks)."""
    old = torch.get_default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


# ---------------------------------------------------------------------------
# operators


def _fail(op: str, *tensors: torch.Tensor, why: str = "shapes do not conform") -> None:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    raise ContractError(f"{op}: {why}: {shapes}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        _fail("matmul", a, b)
    return a @ b


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """x: (batch, in_channels, length); weight: (out, in/groups, kernel)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1] * groups:
        _fail("conv1d", x, weight)
    if x.shape[2] + 2 * padding < weight.shape[2]:
        _fail("conv1d", x, weight, why="kernel longer than padded input")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5):
    if x.dim() < 2 or x.shape[1] % groups:
        _fail("group_norm", x, why=f"channels not divisible by {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def rms_norm(x, weight=None, eps: float = 1e-6):
    if weight is not None and weight.shape != x.shape[-1:]:
        _fail("rms_norm", x, weight)
    y = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)
    return y * weight if weight is not None else y


def gelu(x):
    return F.gelu(x)


def silu(x):
    return F.silu(x)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def cross_entropy(logits, target, label_smoothing: float = 0.0):
    """Mean cross-entropy of (n, classes) logits against integer targets."""
    if logits.dim() != 2 or target.shape != logits.shape[:1]:
        _fail("cross_entropy", logits, target)
    return F.cross_entropy(logits, target, label_smoothing=label_smoothing)


def binary_cross_entropy(logits, target):
    """Binary cross-entropy on raw logits (numerically stable form)."""
    if logits.shape != target.shape:
        _fail("binary_cross_entropy", logits, target)
    return F.binary_cross_entropy_with_logits(logits, target)


def mse(a, b):
    if a.shape != b.shape:
        _fail("mse", a, b)
    return (a - b).pow(2).mean()


def l2_normalize(x, eps: float = 1e-12):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def cosine_similarity(a, b, eps: float = 1e-12):
    if a.shape != b.shape:
        _fail("cosine_similarity", a, b)
    return (l2_normalize(a, eps) * l2_normalize(b, eps)).sum(-1)


def attention(q, k, v):
    """Scaled dot-product attention over the second-to-last axis.

    q: (..., Lq, dk), k: (..., Lk, dk), v: (..., Lk, dv).  Self-attention is
    the case q, k, v derived from the same tokens.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        _fail("attention", q, k, v)
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return matmul(softmax(scores, -1), v)


def add(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail("add", a, b)
    return a + b


def mul(a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail("mul", a, b)
    return a * b


def concat(tensors: Sequence[torch.Tensor], dim: int = -1):
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref):
            _fail("concat", *tensors)
        other[dim] = ref[dim]
        if other != ref:
            _fail("concat", *tensors)
    return torch.cat(list(tensors), dim=dim)


def split(x, sizes: Sequence[int], dim: int = -1):
    if sum(sizes) != x.shape[dim]:
        _fail("split", x, why=f"sizes {list(sizes)} do not sum to axis length")
    return torch.split(x, list(sizes), dim=dim)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


def stop_gradient(x):
    return x.detach()


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, value, source):
        return value.clone()

    @staticmethod
    def backward(ctx, grad):
        return None, grad


def straight_through(value, source):
    """Forward: ``value`` exactly.  Backward: the incoming gradient goes to
    ``source`` unchanged and nothing goes to ``value``."""
    if value.shape != source.shape:
        _fail("straight_through", value, source)
    return _StraightThrough.apply(value, source)


# ---------------------------------------------------------------------------
# layers


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


class MultiHeadAttention(nn.Module):
    """Multi-head attention; pass ``context`` for cross-attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ContractError(f"attention: {heads} heads do not divide width {dim}")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def _heads(self, x):
        *lead, n, d = x.shape
        return x.view(*lead, n, self.heads, d // self.heads).transpose(-2, -3)

    def forward(self, x, context=None):
        context = x if context is None else context
        q, k, v = self._heads(self.q(x)), self._heads(self.k(context)), self._heads(self.v(context))
        y = attention(q, k, v).transpose(-2, -3)
        return self.out(y.reshape(*x.shape))


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(dim, hidden, bias=False)
        self.up = nn.Linear(dim, hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.down(silu(self.gate(x)) * self.up(x))


class MixtureFFN(nn.Module):
    """Top-1 gated mixture of SwiGLU experts."""

    def __init__(self, dim: int, hidden: int, experts: int):
        super().__init__()
        self.router = nn.Linear(dim, experts, bias=False)
        self.experts = nn.ModuleList(SwiGLU(dim, hidden) for _ in range(experts))

    def forward(self, x):
        probs = softmax(self.router(x), -1)
        top = probs.argmax(-1, keepdim=True)
        weight = probs.gather(-1, top)
        outs = torch.stack([e(x) for e in self.experts], dim=-2)
        chosen = outs.gather(-2, top.unsqueeze(-1).expand(*top.shape[:-1], 1, x.shape[-1]))
        return weight * chosen.squeeze(-2)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp: int, experts: int = 0):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.ffn = MixtureFFN(dim, mlp, experts) if experts else SwiGLU(dim, mlp)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


# ---------------------------------------------------------------------------
# randomness


class Streams:
    """Named, independent random substreams derived from one seed.

    Each ``(name, *keys)`` pair maps to its own counter-based Philox stream, so
    draws at one site never shift draws at another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def numpy(self, name: str, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()), *map(int, keys)))
        return np.random.Generator(np.random.Philox(ss))

    def torch(self, name: str, *keys: int) -> torch.Generator:
        seed = int(self.numpy(name, *keys).integers(0, 2**63 - 1))
        return torch.Generator().manual_seed(seed)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_parameters(module: nn.Module, streams: Streams, prefix: str = "", std: float = 0.02) -> None:
    """Truncated normal (2 sigma) for weights and embeddings, zero biases,
    unit norm gains.  Each parameter draws from its own named substream."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            full = f"{prefix}{name}"
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:
                p.fill_(1.0)
            else:
                rng = streams.numpy("init/" + full)
                p.copy_(torch.from_numpy(_truncated_normal(rng, tuple(p.shape), std)))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    peak_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def lr(self, t: int | None = None) -> float:
        t = self.step if t is None else t
        return cosine_lr(t, self.peak_lr, self.min_lr, self.warmup_steps, self.total_steps)


def cosine_lr(t: int, peak: float, minimum: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then cosine decay that
    reaches ``minimum`` at step ``total - 1``.  Never below ``minimum``."""
    if warmup > 0 and t < warmup:
        return max(minimum, peak * (t + 1) / warmup)
    span = total - 1 - warmup
    if span <= 0:
        return peak
    progress = min(1.0, (t - warmup) / span)
    return minimum + 0.5 * (peak - minimum) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: Iterable[tuple[str, nn.Parameter]], max_norm: float) -> float:
    grads = [p.grad for _, p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum(g.pow(2).sum() for g in grads)).item()
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


@torch.no_grad()
def adamw_step(params: Iterable[tuple[str, nn.Parameter]], state: OptimizerState) -> float:
    """One AdamW update at the scheduled learning rate; returns the rate used.

    Weight decay is decoupled and only applied to matrices (ndim >= 2).
    Raises NonFiniteGradient before touching any parameter.
    """
    params = [(n, p) for n, p in params if p.grad is not None]
    for name, p in params:
        if not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    lr = state.lr()
    b1, b2 = state.betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    for name, p in params:
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(p.grad, alpha=1 - b1)
        v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
        if state.weight_decay and p.dim() >= 2:
            p.mul_(1 - lr * state.weight_decay)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    state.step = t
    return lr
