import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pomni import numerics as nx
from pomni.pretrain import (
    MaskedModel, PretrainConfig, compute_targets, evaluate_pretrain, loss_masked, mask_count, masked_nll,
    pretrain_run, sample_mask,
)
from pomni.training import OptimConfig

from conftest import random_batch, tiny_encoders, tiny_tokenizer
from probes import grads_of, reached


def tiny_masked(modalities=("eeg", "eog", "ecg"), **kw):
    return MaskedModel(PretrainConfig(tiny_encoders(modalities), codebook_size=32, **kw)).initialize(nx.Streams(0))


@settings(max_examples=200, deadline=None)
@given(ratio=st.floats(0.001, 0.999), n=st.integers(2, 400))
def test_mask_count_law(ratio, n):
    k = mask_count(ratio, n)
    assert 1 <= k <= n - 1
    if 1 <= math.floor(ratio * n + 0.5) <= n - 1:
        assert abs(k - ratio * n) <= 0.5


@pytest.mark.parametrize("ratio,n,k", [(0.5, 10, 5), (0.7, 10, 7), (0.7, 5, 4), (0.5, 5, 3), (1e-6, 20, 1), (0.999, 4, 3)])
def test_mask_count_examples(ratio, n, k):
    assert mask_count(ratio, n) == k


def test_mask_count_needs_two_patches():
    with pytest.raises(ValueError):
        mask_count(0.5, 1)


def test_sample_mask_rows_have_exact_count_and_vary():
    m = sample_mask(np.random.default_rng(0), 64, 20, 0.7)
    assert m.dtype == torch.bool and torch.all(m.sum(1) == 14)
    assert len({tuple(r.tolist()) for r in m}) > 1
    again = sample_mask(np.random.default_rng(1), 64, 20, 0.7)
    assert not torch.equal(m, again)


def test_uniform_logits_give_twice_log_k():
    K, B, N = 32, 3, 10
    masks = {"eog": sample_mask(np.random.default_rng(0), B, N, 0.7)}
    logits = {"eog": (torch.zeros(B, N, K), torch.zeros(B, N, K))}
    targets = {"eog": (torch.randint(K, (B, N)), torch.randint(K, (B, N)))}
    assert loss_masked(logits, targets, masks).item() == pytest.approx(2 * math.log(K), rel=1e-6)


def test_masked_nll_matches_manual_sum():
    g = torch.Generator().manual_seed(0)
    logits, target = torch.randn(2, 6, 5, generator=g), torch.randint(5, (2, 6), generator=g)
    mask = torch.tensor([[1, 0, 1, 0, 0, 1], [0, 1, 0, 0, 0, 0]], dtype=torch.bool)
    lp = torch.log_softmax(logits.double(), -1)
    manual = -sum(lp[b, n, target[b, n]] for b in range(2) for n in range(6) if mask[b, n])
    assert masked_nll(logits, target, mask).item() == pytest.approx(manual.item(), rel=1e-6)


def test_loss_ignores_unmasked_positions():
    g = torch.Generator().manual_seed(0)
    B, N, K = 2, 8, 16
    mask = sample_mask(np.random.default_rng(3), B, N, 0.5)
    lg = (torch.randn(B, N, K, generator=g), torch.randn(B, N, K, generator=g))
    tg = (torch.randint(K, (B, N), generator=g), torch.randint(K, (B, N), generator=g))
    base = loss_masked({"eeg": lg}, {"eeg": tg}, {"eeg": mask})
    lg2 = tuple(torch.where(mask[..., None], x, torch.randn_like(x) * 100) for x in lg)
    tg2 = tuple(torch.where(mask, x, (x + 3) % K) for x in tg)
    assert torch.equal(base, loss_masked({"eeg": lg2}, {"eeg": tg2}, {"eeg": mask}))


def test_missing_shared_head_only_counts_private():
    K = 8
    mask = {"eog": torch.tensor([[True, False]])}
    logits = {"eog": (torch.zeros(1, 2, K), None)}
    targets = {"eog": (torch.zeros(1, 2, dtype=torch.long), None)}
    assert loss_masked(logits, targets, mask).item() == pytest.approx(math.log(K))


def test_shared_targets_are_repeated_per_window():
    tok = tiny_tokenizer()
    batch = random_batch(["eeg", "eog", "ecg"], windows=2)
    targets = compute_targets(tok, batch)
    private, shared = targets["ecg"]
    assert private.shape == shared.shape == (2, 10)
    assert torch.equal(shared[:, :5], shared[:, :1].expand(2, 5)) and torch.equal(shared[:, 5:], shared[:, 5:6].expand(2, 5))
    idx = tok.code_indices(batch)["ecg"]["shared"]
    assert torch.equal(shared[:, ::5], idx.reshape(2, 2))
    assert targets["eeg"][1].shape == (2, 4)  # 2 channels x 2 windows


def test_forward_shapes_and_mask_tokens():
    model = tiny_masked()
    batch = random_batch(["eeg", "eog", "ecg"])
    masks = model.draw_masks(batch, np.random.default_rng(0))
    out = model(batch, masks)
    for m, (priv, shared) in out.items():
        assert priv.shape == shared.shape == (2, batch.modalities[m].patches.shape[1], 32)
    # masked patch contents cannot influence the output
    b2 = random_batch(["eeg", "eog", "ecg"])
    for m, mb in b2.modalities.items():
        mb.patches = torch.where(masks[m][..., None], mb.patches + 50.0, mb.patches)
    out2 = model(b2, masks)
    assert all(torch.allclose(out[m][0], out2[m][0]) for m in out)


def test_no_shared_codebook_drops_shared_head():
    model = tiny_masked(shared_codebook=False)
    batch = random_batch(["eog"])
    priv, shared = model(batch, model.draw_masks(batch, np.random.default_rng(0)))["eog"]
    assert shared is None and not hasattr(model, "shared_heads")


def test_tokenizer_receives_no_gradient(small_data):
    tok = tiny_tokenizer()
    before = {k: v.clone() for k, v in tok.state_dict().items()}
    model = tiny_masked()
    batch = small_data["train"].batch(np.arange(4))
    targets = compute_targets(tok, batch)
    loss = loss_masked(model(batch, model.draw_masks(batch, np.random.default_rng(0))), targets,
                       model.draw_masks(batch, np.random.default_rng(0)))
    assert reached(grads_of(model, loss)) > 0
    assert not any(t.requires_grad for pair in targets.values() for t in pair if t is not None)
    pretrain_run(model, tok, small_data["train"], OptimConfig(epochs=1, warmup_epochs=0, batch_size=16), nx.Streams(0))
    assert all(torch.equal(before[k], v) for k, v in tok.state_dict().items())
    assert not any(p.requires_grad for p in tok.parameters())


def test_training_smoke_and_masks_redrawn(small_data):
    tok = tiny_tokenizer()
    model = tiny_masked()
    hist = pretrain_run(model, tok, small_data["train"], OptimConfig(peak_lr=3e-3, epochs=3, warmup_epochs=0, batch_size=16),
                        nx.Streams(0))
    losses = [h.loss for h in hist]
    assert all(np.isfinite(losses)) and losses[-1] < losses[0]
    ev = evaluate_pretrain(model, tok, small_data["valid"], nx.Streams(0))
    assert set(ev) == {"L_M", "acc_private", "acc_shared"}
    assert 0 <= ev["acc_private"] <= 1
    s = nx.Streams(0)
    assert not np.array_equal(s.numpy("mask", 0).random(8), s.numpy("mask", 1).random(8))
