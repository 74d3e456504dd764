"""Speech corpus loading and a synthetic talker generator.

A corpus is a directory of mono WAV files, searched recursively. Files in a
subdirectory share a speaker id (the subdirectory name); files directly in the
root are their own speakers. Every recording is resampled to 8 kHz on load.

The synthetic talker is a source-filter model: a band-limited glottal pulse
train with a drifting pitch, shaped by three formant resonators per syllable,
with fricative bursts and pauses. It is only meant to give the pipeline
something speech-like (harmonic, sparse, intermittent) to work on when no real
corpus is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .signal import FS, TimeSignal, load_audio, resample, save_audio


@dataclass(frozen=True)
class Recording:
    signal: TimeSignal
    speaker: str
    name: str

    @property
    def samples(self) -> np.ndarray:
        return self.signal.samples


class CorpusError(RuntimeError):
    pass


def load_corpus(directory, min_seconds: float = 0.0) -> list[Recording]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory not found: {directory}")
    out = []
    for path in sorted(directory.rglob("*.wav")):
        sig = resample(load_audio(path), FS)
        if sig.duration < min_seconds:
            continue
        rel = path.relative_to(directory)
        speaker = rel.parts[0] if len(rel.parts) > 1 else path.stem
        out.append(Recording(sig, speaker, str(rel)))
    if not out:
        raise CorpusError(f"no usable WAV files in {directory}")
    return out


# Rough (F1, F2, F3) targets in Hz for a handful of vowels.
VOWELS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (660, 1720, 2410),
    (300, 870, 2240),
    (570, 840, 2410),
    (440, 1020, 2240),
    (490, 1350, 1690),
    (390, 1990, 2550),
)
_BANDWIDTHS = (80.0, 100.0, 140.0)


def _resonate(x, freq, bw, fs):
    r = math.exp(-math.pi * bw / fs)
    theta = 2 * math.pi * freq / fs
    return lfilter([1.0 - r], [1.0, -2 * r * math.cos(theta), r * r], x)


def _voiced(n, f0, fs, rng):
    t = np.arange(n) / fs
    contour = f0 * (1.0 + rng.uniform(-0.12, 0.12) * t / max(t[-1], 1e-3)
                    + 0.04 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / fs
    n_harm = int(0.45 * fs / contour.max())
    k = np.arange(1, n_harm + 1)
    return (np.sin(np.outer(phase, k)) / k).sum(axis=1)


def synth_speech(duration: float, rng, fs: int = 16000, f0: float | None = None) -> np.ndarray:
    """Speech-like waveform of ``duration`` seconds, peak-normalized to 0.5."""
    f0 = float(rng.uniform(90.0, 240.0)) if f0 is None else float(f0)
    n = int(round(duration * fs))
    out = np.zeros(n)
    hp = butter(4, 2500.0, "highpass", fs=fs, output="sos")
    t = int(rng.uniform(0.0, 0.2) * fs)
    while t < n:
        if rng.random() < 0.3:
            m = int(rng.uniform(0.03, 0.08) * fs)
            burst = sosfilt(hp, rng.standard_normal(m)) * np.hanning(m) * 0.3
            end = min(n, t + m)
            out[t:end] += burst[:end - t]
            t = end
        m = int(rng.uniform(0.12, 0.32) * fs)
        if t + m > n:
            break
        src = _voiced(m, f0, fs, rng)
        vowel = VOWELS[int(rng.integers(len(VOWELS)))]
        for freq, bw in zip(vowel, _BANDWIDTHS):
            src = _resonate(src, freq * rng.uniform(0.9, 1.1), bw, fs)
        env = np.sin(np.pi * np.arange(m) / m) ** 0.6
        seg = src * env
        out[t:t + m] += seg / (np.max(np.abs(seg)) + 1e-12) * rng.uniform(0.5, 1.0)
        t += m
        pause = rng.uniform(0.3, 0.7) if rng.random() < 0.15 else rng.uniform(0.03, 0.15)
        t += int(pause * fs)
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def synthetic_corpus(n_speakers: int = 8, per_speaker: int = 3, seconds: float = 8.0,
                     seed: int = 0, fs: int = 16000) -> list[Recording]:
    """In-memory synthetic corpus (already at 8 kHz)."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_speakers):
        f0 = float(rng.uniform(90.0, 240.0))
        for i in range(per_speaker):
            x = synth_speech(seconds, rng, fs=fs, f0=f0)
            sig = resample(TimeSignal(x, fs), FS)
            out.append(Recording(sig, f"spk{s:02d}", f"spk{s:02d}/utt{i:02d}.wav"))
    return out


def write_synthetic_corpus(directory, n_speakers: int = 8, per_speaker: int = 3,
                           seconds: float = 8.0, seed: int = 0, fs: int = 16000) -> Path:
    """Write a synthetic corpus as 16-bit WAV files, one subdirectory per speaker."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    for s in range(n_speakers):
        f0 = float(rng.uniform(90.0, 240.0))
        spk = directory / f"spk{s:02d}"
        spk.mkdir(parents=True, exist_ok=True)
        for i in range(per_speaker):
            save_audio(spk / f"utt{i:02d}.wav", synth_speech(seconds, rng, fs=fs, f0=f0), fs)
    return directory
