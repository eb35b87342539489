"""In-memory patch datasets built from recordings, and batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import sigproc
from .datagen import Recording


@dataclass
class ModalityArrays:
    patches: np.ndarray  # (S, N, P) float32
    targets: np.ndarray  # (S, N, W) float32
    channel: np.ndarray  # (N,)
    time: np.ndarray  # (N,)
    channels: int
    per_channel: int


@dataclass
class ModalityBatch:
    patches: torch.Tensor
    targets: torch.Tensor
    channel: torch.Tensor
    time: torch.Tensor
    channels: int
    per_channel: int


@dataclass
class Batch:
    modalities: dict[str, ModalityBatch]
    labels: torch.Tensor | None
    index: np.ndarray

    def __len__(self):
        return len(self.index)


class PatchDataset:
    """Preprocessed, patched recordings sharing one montage per modality."""

    def __init__(self, arrays: dict[str, ModalityArrays], labels: np.ndarray | None, subjects: np.ndarray):
        self.arrays = arrays
        self.labels = labels
        self.subjects = subjects

    @property
    def modalities(self) -> list[str]:
        return list(self.arrays)

    def __len__(self):
        return len(self.subjects)

    @classmethod
    def from_recordings(cls, recs: list[Recording], modalities=None) -> "PatchDataset":
        if not recs:
            raise ValueError("no recordings")
        modalities = list(modalities or recs[0].signals)
        arrays = {}
        for m in modalities:
            spec = sigproc.SPECS[m]
            grids = []
            for r in recs:
                if m not in r.signals:
                    raise ValueError(f"recording is missing modality {m!r}")
                x = sigproc.preprocess(r.signals[m], r.rates[m], spec)
                grids.append(sigproc.patchify(x, spec))
            shapes = {g.patches.shape for g in grids}
            if len(shapes) != 1:
                raise ValueError(f"{m}: recordings differ in shape {sorted(shapes)}")
            patches = np.stack([g.patches for g in grids]).astype(np.float32)
            targets = sigproc.reconstruction_target(patches, spec).astype(np.float32)
            g = grids[0]
            arrays[m] = ModalityArrays(patches, targets, g.channel, g.time, g.channels, g.windows)
        labels = None
        if recs[0].label is not None:
            if isinstance(recs[0].label, np.ndarray):
                labels = np.stack([np.asarray(r.label, np.float32) for r in recs])
            else:
                labels = np.array([int(r.label) for r in recs], dtype=np.int64)
        subjects = np.array([r.subject for r in recs])
        return cls(arrays, labels, subjects)

    def batch(self, index, modalities=None) -> Batch:
        index = np.asarray(index)
        mods = {}
        for m in modalities or self.modalities:
            a = self.arrays[m]
            mods[m] = ModalityBatch(
                torch.from_numpy(a.patches[index]).to(torch.get_default_dtype()),
                torch.from_numpy(a.targets[index]).to(torch.get_default_dtype()),
                torch.from_numpy(a.channel),
                torch.from_numpy(a.time),
                a.channels,
                a.per_channel,
            )
        labels = None if self.labels is None else torch.from_numpy(self.labels[index])
        return Batch(mods, labels, index)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, modalities=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start : start + batch_size], modalities)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)
