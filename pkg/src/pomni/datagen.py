"""Synthetic multimodal recordings with a known shared latent, and the PSRD
on-disk recording format.

Every sample carries a class-dependent oscillation whose amplitude varies
from second to second.  The same latent drives a component in every modality;
each modality adds its own private rhythm and white noise.  Amplitudes are in
microvolts so the ``/100`` scaling step is exercised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Streams

MAGIC = b"POMN"
VERSION = 1
MODALITY_CODES = {"eeg": 0, "eog": 1, "ecg": 2, "emg": 3}
CODE_MODALITIES = {v: k for k, v in MODALITY_CODES.items()}
SPLITS = ("train", "valid", "test")


class PsrdFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Recording:
    signals: dict[str, np.ndarray]  # modality -> (channels, time) float32, microvolts
    rates: dict[str, int]
    label: int | np.ndarray | None = None
    subject: int = 0
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        if list(self.signals) != list(other.signals) or self.rates != other.rates:
            return False
        if not all(np.array_equal(self.signals[m], other.signals[m]) for m in self.signals):
            return False
        a, b = self.label, other.label
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
        return a == b


@dataclass
class GenSpec:
    modalities: tuple[str, ...] = ("eeg", "eog", "ecg")
    channels: dict[str, int] = field(default_factory=lambda: {"eeg": 2, "eog": 1, "ecg": 1, "emg": 1})
    source_rates: dict[str, int] = field(default_factory=lambda: {"eeg": 250, "eog": 250, "ecg": 1000, "emg": 1000})
    duration: int = 4  # seconds
    classes: int = 3
    regression_dim: int = 0  # >0 switches to a regression task
    class_freqs: tuple[float, ...] = (5.0, 9.0, 14.0)
    shared_uv: float = 40.0
    private_uv: dict[str, float] = field(default_factory=lambda: {"eeg": 25.0, "eog": 60.0, "ecg": 120.0, "emg": 30.0})
    noise: float = 0.5  # white-noise std relative to shared amplitude
    counts: dict[str, int] = field(default_factory=lambda: {"train": 600, "valid": 150, "test": 150})
    subjects: dict[str, int] = field(default_factory=lambda: {"train": 20, "valid": 5, "test": 5})
    seed: int = 0

    def validate(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for m in self.modalities:
            if m not in MODALITY_CODES:
                raise ValueError(f"unknown modality {m!r}")
            if self.channels.get(m, 0) <= 0:
                raise ValueError(f"{m}: channel count must be positive")
            if self.source_rates.get(m, 0) <= 0:
                raise ValueError(f"{m}: source rate must be positive")
        if self.regression_dim <= 0:
            if self.classes < 2 or len(self.class_freqs) < self.classes:
                raise ValueError("need at least 2 classes and one frequency per class")
            if len(set(self.class_freqs[: self.classes])) != self.classes:
                raise ValueError("class frequencies must be distinct")
        if any(self.counts.get(s, 0) < 0 for s in SPLITS) or self.noise < 0:
            raise ValueError("counts and noise must be non-negative")


# private rhythm band (Hz) per modality, kept clear of the class bands
_PRIVATE_BAND = {"eeg": (20.0, 28.0), "eog": (0.4, 1.2), "ecg": (1.0, 1.6), "emg": (60.0, 90.0)}


def _shared_latent(t: np.ndarray, freq: float, phase: float, amps: np.ndarray) -> np.ndarray:
    centers = np.arange(len(amps)) + 0.5
    env = np.interp(t, centers, amps)
    return env * np.sin(2 * np.pi * freq * t + phase)


def _private(m: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = _PRIVATE_BAND[m]
    f = rng.uniform(lo, hi)
    phase = rng.uniform(0, 2 * np.pi)
    if m == "ecg":
        # narrow periodic pulses, roughly heartbeat-shaped
        cyc = (f * t + phase / (2 * np.pi)) % 1.0
        return np.exp(-0.5 * ((cyc - 0.5) / 0.02) ** 2) - 0.1
    return np.sin(2 * np.pi * f * t + phase)


def generate_one(spec: GenSpec, index: int, split: str, subject: int, label, return_components: bool = False):
    rng = Streams(spec.seed).numpy("gen/" + split, index)
    subj = Streams(spec.seed).numpy("subject/" + split, subject)
    subj_shift = subj.uniform(-0.3, 0.3)
    subj_gain = {m: subj.uniform(0.8, 1.2) for m in MODALITY_CODES}
    if spec.regression_dim > 0:
        freq = 4.0 + 12.0 * float(np.mean(label))
    else:
        freq = spec.class_freqs[label]
    freq += subj_shift + rng.uniform(-0.25, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    amps = rng.uniform(0.4, 1.6, size=spec.duration)
    signals, comps = {}, {}
    for m in spec.modalities:
        rate = spec.source_rates[m]
        t = np.arange(spec.duration * rate) / rate
        shared = _shared_latent(t, freq, phase, amps)
        chans, parts = [], []
        for c in range(spec.channels[m]):
            gain = subj_gain[m] * rng.uniform(0.8, 1.2)
            private = _private(m, t, rng)
            noise = rng.standard_normal(t.size) * spec.noise
            x = spec.shared_uv * (gain * shared + noise) + spec.private_uv[m] * private
            chans.append(x)
            parts.append((gain * shared, private))
        signals[m] = np.asarray(chans, dtype=np.float32)
        comps[m] = parts
    rec = Recording(signals, {m: spec.source_rates[m] for m in spec.modalities}, label, subject, split)
    return (rec, comps) if return_components else rec


def generate(spec: GenSpec) -> list[Recording]:
    """Deterministic dataset; splits use disjoint synthetic subjects."""
    spec.validate()
    out = []
    first_subject = 0
    labels_rng = Streams(spec.seed).numpy("labels")
    for split in SPLITS:
        n, n_subj = spec.counts.get(split, 0), max(1, spec.subjects.get(split, 1))
        for i in range(n):
            if spec.regression_dim > 0:
                label = labels_rng.uniform(0, 1, size=spec.regression_dim).astype(np.float32)
            else:
                label = i % spec.classes
            out.append(generate_one(spec, i, split, first_subject + i % n_subj, label))
        first_subject += n_subj
    return out


# ---------------------------------------------------------------------------
# PSRD files
#
# little-endian: magic "POMN", version u16, label kind u8, modality count u8,
# label payload (u32 class | u16 dim + f32*dim), then per modality:
# code u8, channels u16, rate u32, samples u64, f32 data channel-major.


def encode_psrd(rec: Recording) -> bytes:
    if rec.label is None:
        kind, payload = 0, b""
    elif isinstance(rec.label, np.ndarray):
        vec = np.asarray(rec.label, dtype="<f4").ravel()
        kind, payload = 2, struct.pack("<H", vec.size) + vec.tobytes()
    else:
        kind, payload = 1, struct.pack("<I", int(rec.label))
    parts = [MAGIC, struct.pack("<HBB", VERSION, kind, len(rec.signals)), payload]
    for m, x in rec.signals.items():
        x = np.ascontiguousarray(x, dtype="<f4")
        parts.append(struct.pack("<BHIQ", MODALITY_CODES[m], x.shape[0], rec.rates[m], x.shape[1]))
        parts.append(x.tobytes())
    return b"".join(parts)


def decode_psrd(buf: bytes) -> Recording:
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise PsrdFormatError(f"truncated: need {n} bytes, {len(buf) - off} left", off)
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise PsrdFormatError("bad magic", 0)
    version, kind, count = struct.unpack("<HBB", take(4))
    if version != VERSION:
        raise PsrdFormatError(f"unsupported version {version} (wrong endianness?)", 4)
    if kind == 0:
        label = None
    elif kind == 1:
        (label,) = struct.unpack("<I", take(4))
    elif kind == 2:
        (dim,) = struct.unpack("<H", take(2))
        label = np.frombuffer(take(4 * dim), dtype="<f4").astype(np.float32)
    else:
        raise PsrdFormatError(f"unknown label kind {kind}", 6)
    signals, rates = {}, {}
    for _ in range(count):
        start = off
        code, chans, rate, samples = struct.unpack("<BHIQ", take(15))
        if code not in CODE_MODALITIES:
            raise PsrdFormatError(f"unknown modality code {code}", start)
        m = CODE_MODALITIES[code]
        data = np.frombuffer(take(4 * chans * samples), dtype="<f4").astype(np.float32)
        signals[m] = data.reshape(chans, samples)
        rates[m] = rate
    if off != len(buf):
        raise PsrdFormatError(f"{len(buf) - off} trailing bytes", off)
    return Recording(signals, rates, label)


def write_psrd(rec: Recording, path) -> None:
    Path(path).write_bytes(encode_psrd(rec))


def read_psrd(path) -> Recording:
    return decode_psrd(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifest: path <TAB> label <TAB> split <TAB> subject


def _label_text(label) -> str:
    if label is None:
        return "-"
    if isinstance(label, np.ndarray):
        return ",".join(repr(float(v)) for v in label)
    return str(int(label))


def write_dataset(recs: list[Recording], out_dir) -> Path:
    out = Path(out_dir)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(recs):
        rel = f"recordings/{rec.split}_{i:05d}.psrd"
        write_psrd(rec, out / rel)
        lines.append(f"{rel}\t{_label_text(rec.label)}\t{rec.split}\t{rec.subject}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[Path, str, str, int]]:
    path = Path(path)
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields, got {len(fields)}")
        rel, label, split, subject = fields
        if split not in SPLITS:
            raise ValueError(f"{path}:{n}: unknown split {split!r}")
        rows.append((path.parent / rel, label, split, int(subject)))
    return rows


def load_recordings(manifest, split: str | None = None) -> list[Recording]:
    recs = []
    for p, _, s, subject in read_manifest(manifest):
        if split is not None and s != split:
            continue
        rec = read_psrd(p)
        rec.split, rec.subject = s, subject
        recs.append(rec)
    return recs
