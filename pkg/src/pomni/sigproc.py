"""Preprocessing front end: filtering, resampling, scaling, patching and
reconstruction targets.

All functions take ``(channels, time)`` float arrays and return new arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

MODALITIES = ("eeg", "eog", "ecg", "emg")


class SignalParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    modality: str
    bandpass: tuple[float, float]
    notch: tuple[float, ...]
    rate: int
    patch: int

    @property
    def patch_seconds(self) -> float:
        return self.patch / self.rate

    @property
    def target_width(self) -> int:
        """Decoder output width: Fourier amplitudes for EEG/EMG, raw otherwise."""
        return self.patch // 2 + 1 if self.fourier_target else self.patch

    @property
    def fourier_target(self) -> bool:
        return self.modality in ("eeg", "emg")


SPECS = {
    "eeg": ModalitySpec("eeg", (0.1, 75.0), (50.0,), 200, 200),
    "eog": ModalitySpec("eog", (0.1, 75.0), (50.0,), 200, 100),
    "ecg": ModalitySpec("ecg", (0.5, 60.0), (50.0,), 500, 100),
    "emg": ModalitySpec("emg", (5.0, 200.0), (50.0, 100.0, 150.0), 500, 100),
}


def alignment_factor(modality: str, specs: dict[str, ModalitySpec] = SPECS) -> int:
    """Number of modality patches covering one EEG patch (patch-duration ratio)."""
    ratio = Fraction(specs[modality].patch, specs[modality].rate) ** -1 * Fraction(specs["eeg"].patch, specs["eeg"].rate)
    if ratio.denominator != 1 or ratio < 1:
        raise SignalParameterError(f"{modality}: EEG patch is not a whole number of {modality} patches")
    return int(ratio)


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SignalParameterError("signal contains non-finite values")
    return x


def _edge_padding(x: np.ndarray, settle: float) -> dict:
    # even (mirror) extension long enough for the slowest pole to settle,
    # capped by the signal length; odd extension rings badly on short records
    return {"padtype": "even", "padlen": int(min(x.shape[-1] - 1, 3 * settle))}


def bandpass(x, low: float, high: float, rate: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward, second-order sections)."""
    x = _check_finite(x)
    nyq = rate / 2
    if not 0 < low < high:
        raise SignalParameterError(f"invalid band ({low}, {high})")
    if high >= nyq:
        raise SignalParameterError(f"band edge {high} Hz at or above Nyquist {nyq} Hz")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=rate, output="sos")
    return signal.sosfiltfilt(sos, x, axis=-1, **_edge_padding(x, rate / low))


def notch(x, freqs, rate: float, q: float = 30.0) -> np.ndarray:
    x = _check_finite(x)
    for f0 in freqs:
        if not 0 < f0 < rate / 2:
            raise SignalParameterError(f"notch {f0} Hz outside (0, Nyquist {rate / 2} Hz)")
        b, a = signal.iirnotch(f0, q, fs=rate)
        x = signal.filtfilt(b, a, x, axis=-1, **_edge_padding(x, q * rate / f0))
    return x


def resample(x, src: float, dst: float, taps_per_phase: int = 64, beta: float = 8.0) -> np.ndarray:
    """Polyphase rational resampling with a Kaiser-windowed sinc kernel."""
    x = _check_finite(x)
    try:
        ratio = Fraction(dst).limit_denominator(10**6) / Fraction(src).limit_denominator(10**6)
    except (ValueError, ZeroDivisionError, OverflowError) as exc:
        raise SignalParameterError(f"bad rates {src} -> {dst}") from exc
    if ratio <= 0 or ratio.denominator > 1000 or ratio.numerator > 1000:
        raise SignalParameterError(f"ratio {ratio} too complex for polyphase resampling")
    up, down = ratio.numerator, ratio.denominator
    if up == down:
        return x.copy()
    if x.shape[-1] < 2:
        raise SignalParameterError("need at least 2 samples to resample")
    # kernel length scales with the larger factor, as in scipy's own default
    ntaps = taps_per_phase * max(up, down) + 1
    kernel = signal.firwin(ntaps, 1.0 / max(up, down), window=("kaiser", beta))
    return signal.resample_poly(x, up, down, axis=-1, window=kernel, padtype="reflect")


def scale_normalize(x_uv) -> np.ndarray:
    return np.asarray(x_uv, dtype=np.float64) / 100.0


def preprocess(x, source_rate: float, spec: ModalitySpec) -> np.ndarray:
    """Filter, notch, resample to the modality rate, scale, and trim to whole patches."""
    low, high = spec.bandpass
    high = min(high, 0.45 * source_rate)
    y = bandpass(x, low, high, source_rate)
    y = notch(y, [f for f in spec.notch if f < source_rate / 2], source_rate)
    y = resample(y, source_rate, spec.rate)
    y = scale_normalize(y)
    keep = y.shape[-1] - y.shape[-1] % spec.patch
    return y[..., :keep]


@dataclass
class PatchGrid:
    modality: str
    patches: np.ndarray  # (N, P)
    channel: np.ndarray  # (N,)
    time: np.ndarray  # (N,)
    channels: int

    @property
    def windows(self) -> int:
        return int(self.time.max()) + 1


def patch_indices(channels: int, per_channel: int) -> tuple[np.ndarray, np.ndarray]:
    ch = np.repeat(np.arange(channels), per_channel)
    t = np.tile(np.arange(per_channel), channels)
    return ch, t


def patchify(x, spec: ModalitySpec) -> PatchGrid:
    x = np.asarray(x)
    if x.ndim != 2:
        raise SignalParameterError(f"expected (channels, time), got shape {x.shape}")
    c, t = x.shape
    if t % spec.patch:
        raise SignalParameterError(f"length {t} is not a multiple of patch size {spec.patch}")
    per = t // spec.patch
    ch, ti = patch_indices(c, per)
    return PatchGrid(spec.modality, x.reshape(c * per, spec.patch), ch, ti, c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return grid.patches.reshape(grid.channels, -1)


def zscore_target(patch, eps: float = 1e-5) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    mu = patch.mean(-1, keepdims=True)
    sd = patch.std(-1, keepdims=True)
    return (patch - mu) / (sd + eps)


def fourier_amplitude(patch) -> np.ndarray:
    return np.abs(np.fft.rfft(np.asarray(patch, dtype=np.float64), axis=-1))


def fourier_amplitude_target(patch, eps: float = 1e-5) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.shape[-1] % 2:
        raise SignalParameterError(f"patch length {patch.shape[-1]} must be even")
    return zscore_target(fourier_amplitude(patch), eps)


def reconstruction_target(patches, spec: ModalitySpec) -> np.ndarray:
    return fourier_amplitude_target(patches) if spec.fourier_target else zscore_target(patches)
