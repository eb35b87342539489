import numpy as np
import pytest
import torch

from pomni import datagen, numerics as nx
from pomni.data import Batch, ModalityBatch, PatchDataset
from pomni.encoder import EncoderConfig
from pomni.sigproc import SPECS, alignment_factor, patch_indices
from pomni.tokenizer import Tokenizer, TokenizerConfig

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _float32_default():
    nx.set_precision(32)
    yield
    nx.set_precision(32)


def small_spec(**overrides) -> datagen.GenSpec:
    spec = datagen.GenSpec(
        counts={"train": 48, "valid": 12, "test": 12},
        subjects={"train": 4, "valid": 2, "test": 2},
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


@pytest.fixture(scope="session")
def small_recordings():
    return datagen.generate(small_spec())


@pytest.fixture(scope="session")
def small_data(small_recordings):
    return {
        s: PatchDataset.from_recordings([r for r in small_recordings if r.split == s])
        for s in datagen.SPLITS
    }


def tiny_encoders(modalities=("eeg", "eog", "ecg"), hidden=16, layers=1):
    return {m: EncoderConfig(m, SPECS[m].patch, hidden=hidden, layers=layers, heads=2, mlp=2 * hidden) for m in modalities}


def tiny_tokenizer(modalities=("eeg", "eog", "ecg"), seed=0, **kw):
    cfg = TokenizerConfig(tiny_encoders(modalities), codebook_size=32, code_dim=8, decoder_layers=1, **kw)
    return Tokenizer(cfg).initialize(nx.Streams(seed))


def random_batch(modalities, batch=2, windows=2, channels=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    mods = {}
    for m in modalities:
        spec = SPECS[m]
        c = (channels or {}).get(m, 1 + (m == "eeg"))
        per = windows * alignment_factor(m)
        ch, t = patch_indices(c, per)
        mods[m] = ModalityBatch(
            torch.randn(batch, c * per, spec.patch, generator=g),
            torch.randn(batch, c * per, spec.target_width, generator=g),
            torch.from_numpy(ch), torch.from_numpy(t), c, per,
        )
    return Batch(mods, torch.zeros(batch, dtype=torch.long), np.arange(batch))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
