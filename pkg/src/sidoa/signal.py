"""Audio I/O, resampling, framing and the one-sided spectral transform.

Conventions used by every other module:

* sample rate of the processing chain is 8 kHz, frames are 256 samples (32 ms),
  non-overlapping, trailing remainder dropped;
* the analysis window is a *periodic* Hann window of length 256;
* the forward transform is unscaled, the inverse divides by N
  (``numpy.fft.rfft`` / ``numpy.fft.irfft``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

FS = 8000
FRAME_LEN = 256
N_BINS = FRAME_LEN // 2 + 1
ENERGY_EPS = 1e-12

# Periodic Hann: w[n] = 0.5 - 0.5 cos(2 pi n / N), n = 0..N-1.
HANN = sps.get_window("hann", FRAME_LEN, fftbins=True)


class AudioFormatError(ValueError):
    """Raised for WAV files the loader does not accept."""


@dataclass(frozen=True)
class TimeSignal:
    """A sampled mono waveform."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"TimeSignal must be 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("TimeSignal samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class Frame:
    samples: np.ndarray
    index: int


@dataclass(frozen=True)
class SpectralFrame:
    bins: np.ndarray
    frame_index: int


def load_audio(path) -> TimeSignal:
    """Read a mono PCM WAV file (16-bit int or 32-bit float).

    16-bit samples are divided by 32768, so full scale 32767 maps to
    32767/32768 and -32768 maps to -1.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: unsupported WAV file ({exc})") from exc
    if data.ndim != 1:
        raise AudioFormatError(
            f"{path}: expected mono audio, file has {data.shape[1]} channels"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(
            f"{path}: unsupported sample format {data.dtype} "
            "(expected 16-bit int or 32-bit float)"
        )
    return TimeSignal(samples, rate)


def save_audio(path, sig, sample_rate: int | None = None) -> None:
    """Write a 16-bit PCM WAV. ``sig`` may be a TimeSignal or a (n,) / (n, ch) array."""
    if isinstance(sig, TimeSignal):
        data, rate = sig.samples, sig.sample_rate
    else:
        data, rate = np.asarray(sig, dtype=np.float64), sample_rate
    if rate is None:
        raise ValueError("sample_rate is required for raw arrays")
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(Path(path), int(rate), pcm)


def resample(sig: TimeSignal, target_rate: int) -> TimeSignal:
    """Polyphase windowed-sinc resampling.

    The anti-aliasing prototype has 64 taps per polyphase branch
    (Kaiser window, beta 8), cut off at the lower of the two Nyquist rates.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == sig.sample_rate:
        return sig
    g = np.gcd(target_rate, sig.sample_rate)
    up, down = target_rate // g, sig.sample_rate // g
    rate = max(up, down)
    taps = sps.firwin(64 * rate, 1.0 / rate, window=("kaiser", 8.0))
    out = sps.resample_poly(sig.samples, up, down, window=taps)
    return TimeSignal(out, target_rate)


def frame_signal(sig: TimeSignal) -> list[Frame]:
    if sig.sample_rate != FS:
        raise ValueError(f"framing expects {FS} Hz audio, got {sig.sample_rate} Hz")
    n = len(sig) // FRAME_LEN
    return [
        Frame(sig.samples[i * FRAME_LEN:(i + 1) * FRAME_LEN].copy(), i) for i in range(n)
    ]


def frame_array(x: np.ndarray) -> np.ndarray:
    """Vectorized framing: (..., n) -> (..., n // 256, 256)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1] // FRAME_LEN
    return x[..., : n * FRAME_LEN].reshape(*x.shape[:-1], n, FRAME_LEN)


def forward_spectrum(frame: Frame) -> SpectralFrame:
    samples = np.asarray(frame.samples, dtype=np.float64)
    if samples.shape != (FRAME_LEN,):
        raise ValueError(f"frame must have {FRAME_LEN} samples, got {samples.shape}")
    return SpectralFrame(np.fft.rfft(samples * HANN), frame.index)


def spectra(frames: np.ndarray) -> np.ndarray:
    """Windowed one-sided spectra of an array of frames along the last axis."""
    return np.fft.rfft(np.asarray(frames, dtype=np.float64) * HANN, axis=-1)


def inverse_spectrum(spec: SpectralFrame) -> np.ndarray:
    """Inverse of :func:`forward_spectrum` (returns the *windowed* frame)."""
    return np.fft.irfft(spec.bins, n=FRAME_LEN)


def frame_energy(frame) -> float:
    """Mean-square energy of a frame in dB, floored at -120 dB for silence."""
    x = frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    return float(10.0 * np.log10(np.mean(x ** 2) + ENERGY_EPS))


def frame_energies(x: np.ndarray) -> np.ndarray:
    """dB energy of every full frame of a 1-D signal."""
    frames = frame_array(x)
    return 10.0 * np.log10(np.mean(frames ** 2, axis=-1) + ENERGY_EPS)
