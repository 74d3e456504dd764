"""GCC-PHAT feature maps, external-microphone masks and alignment.

Lag convention: a feature vector holds 24 lags ordered -12 ... +11, and a positive
lag means the second channel (``b`` / ``l``) lags the first (``a`` / ``k``).
With ``R = A conj(B) / |A conj(B)|`` the inverse transform peaks at index ``-d``
when ``b`` is ``a`` delayed by ``d``, so lag ``tau`` is read from circular index
``-tau``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import correlate

from .signal import FRAME_LEN, SpectralFrame, TimeSignal

TAU_MAX = 12
N_LAGS = 2 * TAU_MAX
LAGS = np.arange(-TAU_MAX, TAU_MAX)
PHAT_EPS = 1e-12
MAX_ALIGN_SECONDS = 0.05

_LAG_INDEX = (-LAGS) % FRAME_LEN


class AlignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    frame_index: int = 0

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.bits))


@dataclass(frozen=True)
class PhaseDifference:
    phi: np.ndarray


@dataclass(frozen=True)
class GccFeatureMap:
    values: np.ndarray  # (M, M, 24)
    frame_index: int = 0


def _bins(x) -> np.ndarray:
    return np.asarray(x.bins if isinstance(x, SpectralFrame) else x)


def wrap_phase(phi):
    """Wrap to (-pi, pi]; values already inside are returned untouched."""
    phi = np.asarray(phi, dtype=np.float64)
    out = np.pi - np.mod(np.pi - phi, 2 * np.pi)
    return np.where((phi > np.pi) | (phi <= -np.pi), out, phi)


def _lag_window(cc: np.ndarray) -> np.ndarray:
    return cc[..., _LAG_INDEX]


def _cross_phase(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """arg a - arg b as the angle of a conj(b), in (-pi, pi]; near-zero bins get phase 0.

    ``np.angle`` returns -pi for a negative real with a -0.0 imaginary part; the
    wrap maps it to +pi so masked and unmasked paths see identical values.
    """
    cross = a * np.conj(b)
    phi = np.angle(cross)
    phi[phi == -np.pi] = np.pi
    phi[np.abs(cross) < PHAT_EPS] = 0.0
    return phi


def gcc_phat(a, b) -> np.ndarray:
    """Plain GCC-PHAT of two one-sided spectra, 24 lags (-12 ... +11)."""
    a, b = _bins(a), _bins(b)
    if a.shape != b.shape:
        raise ValueError(f"spectra differ in length: {a.shape} vs {b.shape}")
    cross = a * np.conj(b)
    cross = np.where(np.abs(cross) < PHAT_EPS, 1.0 + 0.0j, cross)
    cc = np.fft.irfft(cross / np.abs(cross), n=2 * (a.shape[-1] - 1))
    return _lag_window(cc)


def compute_mask(ext_frame, x: float) -> BinaryMask:
    """Keep bins whose external-mic magnitude reaches its x-th percentile.

    The percentile is nearest-rank: the smallest magnitude m such that at least
    x % of the bins are <= m.
    """
    if not 0.0 <= x <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {x}")
    mags = np.abs(_bins(ext_frame))
    n = mags.shape[-1]
    rank = max(1, math.ceil(round(x * n / 100.0, 9)))
    threshold = np.sort(mags, axis=-1)[..., rank - 1]
    bits = mags >= threshold[..., None] if mags.ndim > 1 else mags >= threshold
    idx = ext_frame.frame_index if isinstance(ext_frame, SpectralFrame) else 0
    return BinaryMask(bits, idx)


def masks_for_frames(ext_spectra: np.ndarray, x: float) -> np.ndarray:
    """Boolean masks for a stack of external-mic spectra, shape (F, bins)."""
    return compute_mask(np.asarray(ext_spectra), x).bits


def masked_phase(a, b, mask, rng) -> PhaseDifference:
    """Phase difference on kept bins, uniform noise on [0, 2 pi] elsewhere, wrapped."""
    a, b = _bins(a), _bins(b)
    bits = np.asarray(mask.bits if isinstance(mask, BinaryMask) else mask, dtype=bool)
    if not (a.shape == b.shape == bits.shape):
        raise ValueError("spectra and mask lengths differ")
    return PhaseDifference(np.where(bits, _cross_phase(a, b), _uniform_phase(rng, bits.shape)))


def informed_gcc_phat(phi) -> np.ndarray:
    phi = np.asarray(phi.phi if isinstance(phi, PhaseDifference) else phi, dtype=np.float64)
    cc = np.fft.irfft(np.exp(1j * phi), n=2 * (phi.shape[-1] - 1))
    return _lag_window(cc)


def pair_phases(specs: np.ndarray) -> np.ndarray:
    """Wrapped cross phases of every ordered channel pair: (..., M, bins) -> (..., M, M, bins)."""
    specs = np.asarray(specs)
    return _cross_phase(specs[..., :, None, :], specs[..., None, :, :])


def _uniform_phase(rng, shape) -> np.ndarray:
    """U[0, 2 pi] draws mapped into (-pi, pi]."""
    u = rng.uniform(0.0, 2 * np.pi, size=shape)
    return np.where(u > np.pi, u - 2 * np.pi, u)


def maps_from_phases(phi: np.ndarray, bits: np.ndarray | None = None, noise: np.ndarray | None = None) -> np.ndarray:
    """24-lag maps from pair phases; masked bins (bit 0) take the matching ``noise`` value.

    ``phi`` is (..., M, M, bins), ``bits`` (..., bins) and ``noise`` shaped like ``phi``.
    """
    if bits is not None:
        phi = np.where(bits[..., None, None, :], phi, noise)
    cc = np.fft.irfft(np.exp(1j * phi), n=2 * (phi.shape[-1] - 1), axis=-1)
    return _lag_window(cc)


def _maps(specs: np.ndarray, bits: np.ndarray | None, noise: np.ndarray | None) -> np.ndarray:
    return maps_from_phases(pair_phases(specs), bits, noise)


def feature_map(frame_specs, mask=None, rng=None) -> GccFeatureMap:
    """All M x M ordered pairs (diagonal included) of one frame.

    Without a mask the map is the plain GCC-PHAT (computed in its phase form);
    with a mask every pair gets the same mask and its own noise draw.
    """
    specs = np.stack([_bins(s) for s in frame_specs]) if not isinstance(frame_specs, np.ndarray) else frame_specs
    idx = frame_specs[0].frame_index if isinstance(frame_specs[0], SpectralFrame) else 0
    if mask is None:
        return GccFeatureMap(_maps(specs, None, None), idx)
    if rng is None:
        raise ValueError("a masked feature map needs an rng for the phase noise")
    bits = np.asarray(mask.bits if isinstance(mask, BinaryMask) else mask, dtype=bool)
    m = specs.shape[0]
    return GccFeatureMap(_maps(specs, bits, _uniform_phase(rng, (m, m, specs.shape[-1]))), idx)


def feature_maps(specs: np.ndarray, masks: np.ndarray | None = None, rngs=None) -> np.ndarray:
    """Vectorized :func:`feature_map` over frames.

    ``specs`` is (F, M, bins); ``masks`` (F, bins) or None; ``rngs`` gives one
    generator per frame so results do not depend on how frames are batched.
    Returns (F, M, M, 24).
    """
    specs = np.asarray(specs)
    if masks is None:
        return _maps(specs, None, None)
    f, m, nb = specs.shape
    if rngs is None or len(rngs) != f:
        raise ValueError("masked feature maps need one rng per frame")
    return _maps(specs, np.asarray(masks, dtype=bool), phase_noise(rngs, m, nb))


def phase_noise(rngs, m: int, n_bins: int) -> np.ndarray:
    """One (M, M, bins) block of wrapped uniform phase per generator."""
    return np.stack([_uniform_phase(r, (m, m, n_bins)) for r in rngs])


def align_external(ext: TimeSignal, center_mic: TimeSignal, max_lag: int | None = None):
    """Delay the external-mic signal by the lag maximizing its cross-correlation with
    the center microphone (lags 0 ... 50 ms; the external mic leads).

    Returns ``(aligned, lag)``; the aligned signal keeps the original length,
    zero-padded at the head.
    """
    if ext.sample_rate != center_mic.sample_rate:
        raise ValueError("external and array signals must share a sample rate")
    if len(ext) < FRAME_LEN or len(center_mic) < FRAME_LEN:
        raise ValueError(f"alignment needs at least {FRAME_LEN} samples per signal")
    if max_lag is None:
        max_lag = int(round(MAX_ALIGN_SECONDS * ext.sample_rate))
    e, c = ext.samples, center_mic.samples
    if not np.any(e) or not np.any(c):
        warnings.warn("alignment on an all-zero signal; using lag 0", AlignmentWarning, stacklevel=2)
        return ext, 0
    # full[k] = sum_n c[n + k - (len(e) - 1)] e[n]; lag L sits at k = L + len(e) - 1
    full = correlate(c, e, mode="full", method="fft")
    hi = min(max_lag, len(c) - 1)
    window = full[len(e) - 1:len(e) + hi]
    lag = int(np.argmax(window))
    aligned = np.concatenate([np.zeros(lag), e[:len(e) - lag]])
    return TimeSignal(aligned, ext.sample_rate), lag


# --------------------------------------------------------------- binary record I/O
#
# Feature-map record, little endian:
#   offset 0   4s   magic b"GCCF"
#   offset 4   u16  format version (1)
#   offset 6   u16  M (microphones)
#   offset 8   u16  lags per pair (2 tau_max)
#   offset 10  u16  reserved, 0
#   offset 12  u64  frame count
#   offset 20  f32  values, row-major (frame, k, l, lag)

RECORD_MAGIC = b"GCCF"
RECORD_VERSION = 1
_HEADER = struct.Struct("<4sHHHHQ")


def write_feature_records(path, maps: np.ndarray) -> None:
    maps = np.asarray(maps)
    if maps.ndim != 4 or maps.shape[1] != maps.shape[2]:
        raise ValueError(f"expected (frames, M, M, lags), got {maps.shape}")
    n, m, _, lags = maps.shape
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, m, lags, 0, n))
        fh.write(np.ascontiguousarray(maps, dtype="<f4").tobytes())


def read_feature_records(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature record")
    magic, version, m, lags, _, n = _HEADER.unpack_from(raw)
    if magic != RECORD_MAGIC:
        raise ValueError(f"{path}: not a feature record")
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported feature record version {version}")
    expected = _HEADER.size + 4 * n * m * m * lags
    if len(raw) != expected:
        raise ValueError(f"{path}: corrupt feature record ({len(raw)} bytes, expected {expected})")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return values.reshape(n, m, m, lags).astype(np.float64)


