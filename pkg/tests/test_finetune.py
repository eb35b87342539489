import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pomni import numerics as nx
from pomni.finetune import (
    Aggregator, FinetuneConfig, FinetuneModel, LengthMapping, LossWeights, SubsetError, evaluate, finetune_run, infer,
    loss_align, loss_finetune, nearest_prototype,
)
from pomni.training import OptimConfig

from conftest import random_batch, tiny_encoders
from oracles import brute_force_nearest
from probes import grads_of, reached

MODS = ["eeg", "eog", "ecg"]


def tiny_model(task="multiclass", outputs=3, modalities=MODS, **kw):
    cfg = FinetuneConfig(tiny_encoders(modalities), task=task, outputs=outputs, length=8, width=16, heads=2, mlp=32, **kw)
    return FinetuneModel(cfg).initialize(nx.Streams(0))


def labelled(batch, labels):
    batch.labels = torch.as_tensor(labels)
    return batch


# -- length mapping and aggregation ---------------------------------------------


@settings(max_examples=40, deadline=None)
@given(n_in=st.integers(1, 30), n_out=st.integers(1, 20), seed=st.integers(0, 1000))
def test_length_mapping_weights_are_convex(n_in, n_out, seed):
    torch.manual_seed(seed)
    hrm = LengthMapping(6, n_out, 4)
    w = hrm.weights(torch.randn(2, n_in, 6))
    assert w.shape == (2, n_in, n_out)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(-2), torch.ones(2, n_out), atol=1e-5)
    assert hrm(torch.randn(2, n_in, 6)).shape == (2, n_out, 4)


def test_length_mapping_single_token_copies_it():
    hrm = LengthMapping(5, 7, 5)
    z = torch.randn(3, 1, 5)
    assert torch.allclose(hrm.weights(z), torch.ones(3, 1, 7))
    pooled = torch.matmul(hrm.weights(z).transpose(-1, -2), z)
    assert torch.allclose(pooled, z.expand(3, 7, 5))


def test_aggregator_starts_as_mean_pool():
    model = tiny_model()
    agg = model.aggregators["eog"]
    x = torch.randn(4, 8, 16)
    assert torch.allclose(agg(x), x.mean(1), atol=1e-6)


def test_aggregator_is_per_feature_weighted_sum():
    agg = Aggregator(5, 3)
    with torch.no_grad():
        agg.weight.normal_()
        agg.bias.normal_()
    x = torch.randn(2, 5, 3)
    manual = torch.einsum("bnd,dn->bd", x, agg.weight[:, 0]) + agg.bias
    assert torch.allclose(agg(x), manual, atol=1e-5)


def test_feature_shapes_for_any_patch_count():
    model = tiny_model()
    for windows in (1, 3):
        feats = model(random_batch(MODS, batch=2, windows=windows))
        assert all(h.shape == (2, 16) for h in feats.values())


# -- subsets ----------------------------------------------------------------------


def test_subset_prediction_ignores_other_modalities():
    model = tiny_model().eval()
    a = random_batch(MODS, seed=0)
    b = random_batch(MODS, seed=1)
    b.modalities["eog"] = a.modalities["eog"]
    assert torch.equal(infer(model, a, ["eog"]), infer(model, b, ["eog"]))
    assert not torch.equal(infer(model, a), infer(model, b))


def test_main_prediction_is_order_invariant():
    model = tiny_model().eval()
    batch = random_batch(MODS)
    ref = infer(model, batch)
    for perm in itertools.permutations(MODS):
        assert torch.equal(infer(model, batch, list(perm)), ref)


def test_all_nonempty_subsets_run():
    model = tiny_model().eval()
    batch = random_batch(MODS)
    subsets = [s for r in range(1, 4) for s in itertools.combinations(MODS, r)]
    assert len(subsets) == 2 ** len(MODS) - 1
    for s in subsets:
        assert torch.isfinite(infer(model, batch, s)).all()


def test_empty_or_unknown_subset_raises():
    model = tiny_model()
    batch = random_batch(MODS)
    with pytest.raises(SubsetError):
        model(batch, [])
    with pytest.raises(SubsetError):
        model.predict_main({})
    with pytest.raises(SubsetError):
        model(random_batch(["eeg", "emg"]), ["emg"])
    with pytest.raises(SubsetError):
        model(random_batch(["eeg"]), ["eog"])


# -- losses -----------------------------------------------------------------------


def test_align_loss_examples():
    protos = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    h = torch.tensor([[1.0, 0.0], [0.0, 3.0]])
    assert loss_align({"a": h}, torch.tensor([0, 1]), protos, "multiclass").item() == pytest.approx(2.0)
    two = loss_align({"a": h, "b": h}, torch.tensor([0, 1]), protos, "multiclass")
    assert two.item() == pytest.approx(4.0)
    assert loss_align({"a": protos}, torch.tensor([0, 1]), protos, "multiclass").item() == 0.0


def test_regression_uses_cosine_nearest_prototype():
    rng = np.random.default_rng(0)
    h, protos = rng.standard_normal((200, 8)), rng.standard_normal((16, 8))
    unit = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    idx = nearest_prototype(torch.tensor(h, dtype=torch.float32), torch.tensor(protos, dtype=torch.float32))
    assert np.array_equal(idx.numpy(), brute_force_nearest(h.astype(np.float32), unit.astype(np.float32)))
    ht, pt = torch.tensor(h), torch.tensor(protos)
    expected = (ht - pt[idx]).pow(2).sum(-1).mean()
    assert loss_align({"x": ht}, None, pt, "regression").item() == pytest.approx(expected.item())


def test_prototype_gradient_only_for_present_classes():
    model = tiny_model(outputs=4)
    batch = labelled(random_batch(MODS, batch=3), [0, 2, 2])
    loss, _ = loss_finetune(model, batch)
    g = torch.autograd.grad(loss, model.prototypes)[0]
    norms = g.norm(dim=-1)
    assert norms[0] > 0 and norms[2] > 0
    assert norms[1] == 0 and norms[3] == 0


def test_zero_weights_give_zero_loss():
    model = tiny_model(weights=LossWeights(main=0.0, align=0.0, spec={m: 0.0 for m in MODS}))
    loss, terms = loss_finetune(model, labelled(random_batch(MODS), [0, 1]))
    assert loss.item() == 0.0 and terms == {}


def test_disabled_terms_do_not_reach_their_parameters():
    batch = labelled(random_batch(MODS), [0, 1])
    no_spec = tiny_model(spec_loss=False)
    assert reached(grads_of(no_spec, loss_finetune(no_spec, batch)[0]), "spec_heads.") == 0
    no_align = tiny_model(prototype_align=False)
    assert reached(grads_of(no_align, loss_finetune(no_align, batch)[0]), "prototypes") == 0
    full = tiny_model()
    g = grads_of(full, loss_finetune(full, batch)[0])
    assert reached(g, "spec_heads.") > 0 and reached(g, "prototypes") > 0


def test_frozen_encoders_get_no_gradient():
    model = tiny_model(freeze_encoders=True)
    loss, _ = loss_finetune(model, labelled(random_batch(MODS), [0, 1]))
    assert reached(grads_of(model, loss), "encoders.") == 0
    assert not any(p.requires_grad for p in model.encoders.parameters())


def test_binary_and_regression_heads():
    b = tiny_model(task="binary", outputs=2)
    assert b.main_head.out_features == 1 and b.prototypes.shape[0] == 2
    loss, _ = loss_finetune(b, labelled(random_batch(MODS), [0.0, 1.0]))
    assert torch.isfinite(loss)
    r = tiny_model(task="regression", outputs=2)
    assert r.prototypes.shape[0] == 16
    loss, _ = loss_finetune(r, labelled(random_batch(MODS), [[0.1, 0.2], [0.3, -1.0]]))
    assert torch.isfinite(loss)


def test_moe_fuser_variant_runs():
    model = tiny_model(experts=2)
    loss, _ = loss_finetune(model, labelled(random_batch(MODS), [0, 1]))
    assert torch.isfinite(loss)


def test_warm_start_copies_encoder_state():
    src = tiny_model()
    state = {m: e.state_dict() for m, e in src.encoders.items()}
    cfg = FinetuneConfig(tiny_encoders(MODS), length=8, width=16, heads=2, mlp=32)
    dst = FinetuneModel(cfg).initialize(nx.Streams(5), state)
    for m in MODS:
        for k, v in state[m].items():
            assert torch.equal(dst.encoders[m].state_dict()[k], v)


# -- training ---------------------------------------------------------------------


def test_training_smoke_and_best_selection(small_data):
    model = tiny_model()
    hist, best = finetune_run(model, small_data["train"], small_data["valid"],
                              OptimConfig(peak_lr=3e-3, epochs=3, warmup_epochs=0, batch_size=16), nx.Streams(0))
    assert all(np.isfinite(h.loss) for h in hist)
    scores = [h.metrics["cohens_kappa"] for h in hist]
    top = max(scores)
    assert best["epoch"] == max(i for i, s in enumerate(scores) if s == top)
    model.load_state_dict(best["state"])
    rep = evaluate(model, small_data["valid"])
    assert rep.monitor == pytest.approx(top)
