"""Shoebox rooms, the 15-microphone arc array, image-source RIRs and scene rendering.

Coordinates are meters in the room frame (origin at a corner, z up).  The array
lives in its own local frame: the width axis is local y, the arc bows toward
local +x, which is also the broadside (azimuth 0).  Azimuths are counter-clockwise
in degrees, relative to the array orientation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np
from scipy.optimize import brentq
from numba import njit
from scipy.signal import fftconvolve

from .signal import FS

C = 343.0
N_MICS = 15
EXT_OFFSET = 0.2
SINC_TAPS = 81
N_CLASSES = 72
CLASS_WIDTH = 5.0

# Array layout constants: 7 mics on each side of the middle mic, lateral offsets
# log-spaced up to 0.2 m, placed on a circular arc whose ends sit 0.13 m behind the
# middle mic.
ARRAY_HALF_WIDTH = 0.2
ARRAY_DEPTH = 0.13
_ARC_RADIUS = (ARRAY_HALF_WIDTH ** 2 + ARRAY_DEPTH ** 2) / (2 * ARRAY_DEPTH)


class SimulationError(RuntimeError):
    pass


def _local_layout() -> np.ndarray:
    side = ARRAY_HALF_WIDTH * (10.0 ** (np.arange(1, 8) / 7.0) - 1.0) / 9.0
    y = np.concatenate([-side[::-1], [0.0], side])
    x = np.sqrt(_ARC_RADIUS ** 2 - y ** 2) - _ARC_RADIUS
    return np.stack([x, y, np.zeros_like(y)], axis=1)


LOCAL_LAYOUT = _local_layout()


def _rotation(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_degrees(a):
    """Map angles to [0, 360)."""
    return np.mod(a, 360.0)


def circular_distance(a, b):
    """Absolute angular separation in degrees, in [0, 180]."""
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), 360.0)
    return np.minimum(d, 360.0 - d)


@dataclass(frozen=True)
class MicArray:
    positions: np.ndarray  # (15, 3), relative to center, already rotated
    center: np.ndarray
    orientation: float

    @property
    def absolute(self) -> np.ndarray:
        return self.center + self.positions

    def azimuth_of(self, point) -> float:
        """Azimuth of a room point seen from the array center, relative to orientation."""
        d = np.asarray(point, dtype=float) - self.center
        world = math.degrees(math.atan2(d[1], d[0]))
        return float(wrap_degrees(world - self.orientation))

    def direction(self, azimuth: float) -> np.ndarray:
        """Unit vector (room frame, horizontal) for an array-relative azimuth."""
        a = math.radians(azimuth + self.orientation)
        return np.array([math.cos(a), math.sin(a), 0.0])


def build_array(center, orientation: float = 0.0) -> MicArray:
    center = np.asarray(center, dtype=float)
    positions = LOCAL_LAYOUT @ _rotation(orientation).T
    return MicArray(positions, center, float(orientation))


def class_of_azimuth(azimuth: float) -> int:
    return int(round(azimuth / CLASS_WIDTH)) % N_CLASSES


def azimuth_of_class(cls: int) -> float:
    return (int(cls) % N_CLASSES) * CLASS_WIDTH


# --------------------------------------------------------------------------- rooms

def sabine_absorption(dimensions, t60: float) -> float:
    lx, ly, lz = dimensions
    volume = lx * ly * lz
    surface = 2 * (lx * ly + ly * lz + lx * lz)
    return min(1.0, 0.161 * volume / (surface * t60))


@njit(cache=True)
def _axis_images(length, s, n_max):
    m = 2 * (2 * n_max + 1)
    coord = np.empty(m)
    order = np.empty(m, dtype=np.int64)
    i = 0
    for n in range(-n_max, n_max + 1):
        coord[i] = 2.0 * n * length + s
        order[i] = 2 * abs(n)
        coord[i + 1] = 2.0 * n * length - s
        order[i + 1] = abs(n - 1) + abs(n)
        i += 2
    return coord, order


@njit(cache=True)
def _ism_kernel(dims, src, rcv, beta, length, skip_direct, by_order, n_orders):
    """Accumulate image contributions beta**order / (4 pi d) at round(d fs / c).

    ``by_order`` histograms the (delay, order) pairs for a single receiver instead
    (beta unused); this feeds the absorption solver.
    """
    n_rcv = rcv.shape[0]
    centre = np.zeros(3)
    for r in range(n_rcv):
        for a in range(3):
            centre[a] += rcv[r, a] / n_rcv
    spread = 0.0
    for r in range(n_rcv):
        d2 = 0.0
        for a in range(3):
            d2 += (rcv[r, a] - centre[a]) ** 2
        spread = max(spread, math.sqrt(d2))
    max_dist = length * C / FS + spread + 1.0
    cx, ox = _axis_images(dims[0], src[0], int(math.ceil(max_dist / (2 * dims[0]))) + 2)
    cy, oy = _axis_images(dims[1], src[1], int(math.ceil(max_dist / (2 * dims[1]))) + 2)
    cz, oz = _axis_images(dims[2], src[2], int(math.ceil(max_dist / (2 * dims[2]))) + 2)
    if by_order:
        out = np.zeros((length, n_orders))
    else:
        out = np.zeros((n_rcv, length))
    md2 = max_dist * max_dist
    scale = FS / C
    for i in range(cx.shape[0]):
        dx = (cx[i] - centre[0]) ** 2
        if dx > md2:
            continue
        for j in range(cy.shape[0]):
            dxy = dx + (cy[j] - centre[1]) ** 2
            if dxy > md2:
                continue
            for k in range(cz.shape[0]):
                if dxy + (cz[k] - centre[2]) ** 2 > md2:
                    continue
                order = ox[i] + oy[j] + oz[k]
                if order == 0 and skip_direct:
                    continue
                if by_order:
                    if order >= n_orders:
                        continue
                    d = math.sqrt((cx[i] - rcv[0, 0]) ** 2 + (cy[j] - rcv[0, 1]) ** 2
                                  + (cz[k] - rcv[0, 2]) ** 2)
                    t = int(math.floor(d * scale + 0.5))
                    if t < length:
                        out[t, order] += 1.0 / (4.0 * math.pi * d)
                    continue
                gain = beta ** order / (4.0 * math.pi)
                for r in range(n_rcv):
                    d = math.sqrt((cx[i] - rcv[r, 0]) ** 2 + (cy[j] - rcv[r, 1]) ** 2
                                  + (cz[k] - rcv[r, 2]) ** 2)
                    t = int(math.floor(d * scale + 0.5))
                    if t < length:
                        out[r, t] += gain / d
    return out


def _edc_t60(energy: np.ndarray, fs: int = FS) -> float:
    """T60 from a squared impulse response: Schroeder integral, -5..-25 dB line fit."""
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        return math.nan
    edc_db = 10 * np.log10(np.maximum(edc / edc[0], 1e-300))
    if not np.any(edc_db <= -25.0):
        return math.nan
    i5 = int(np.argmax(edc_db <= -5.0))
    i25 = int(np.argmax(edc_db <= -25.0))
    if i25 <= i5 + 1:
        return 0.0
    t = np.arange(i5, i25) / fs
    slope = np.polyfit(t, edc_db[i5:i25], 1)[0]
    return float(-60.0 / slope)


def estimate_t60(taps, fs: int = FS) -> float:
    """Schroeder backward-integration T60 estimate (T20 fit extrapolated to 60 dB).

    Returns NaN when the decay curve never falls 25 dB and 0 when it falls
    within a single sample.
    """
    taps = np.asarray(taps, dtype=float)
    return _edc_t60(taps ** 2, fs)


@dataclass(frozen=True)
class Room:
    """Shoebox room with uniform wall absorption.

    The absorption coefficient is derived from ``t60``. Sabine's formula gives the
    scale of the problem, but the image-source decay in an elongated shoebox does not
    follow it, so the wall reflection coefficient is solved (Brent) such that the
    Schroeder decay of the image-source response at a reference
    source/receiver pair hits ``t60``. Pass ``absorption`` to override; 1.0 gives
    a free-field (direct path only) response.
    """

    dimensions: np.ndarray
    t60: float
    absorption_override: float | None = None

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValueError(f"room dimensions must be 3 positive lengths, got {dims}")
        if self.absorption_override is None and not self.t60 > 0:
            raise ValueError(f"t60 must be positive, got {self.t60}")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "t60", float(self.t60))

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < self.dimensions - margin))

    @property
    def sabine_absorption(self) -> float:
        return sabine_absorption(self.dimensions, self.t60)

    @cached_property
    def reflection(self) -> float:
        """Pressure reflection coefficient shared by all six walls."""
        if self.absorption_override is not None:
            return math.sqrt(max(0.0, 1.0 - float(self.absorption_override)))
        return _solve_reflection(self.dimensions, self.t60)

    @property
    def absorption(self) -> float:
        return 1.0 - self.reflection ** 2

    @property
    def rir_length(self) -> int:
        if self.absorption_override is not None and self.reflection == 0.0:
            diag = float(np.linalg.norm(self.dimensions))
            return int(math.ceil(diag / C * FS)) + SINC_TAPS
        return int(math.ceil(1.2 * self.t60 * FS))


def _solve_reflection(dimensions, t60: float) -> float:
    n = int(math.ceil(1.2 * t60 * FS))
    src = dimensions * np.array([0.31, 0.43, 0.47])
    rcv = dimensions * np.array([[0.58, 0.52, 0.5]])
    # reflection order can not exceed the number of wall crossings within the horizon
    n_orders = int(np.sum(np.ceil(n * C / FS / dimensions))) + 4
    hist = _ism_kernel(dimensions, src, rcv, 0.0, n, False, True, n_orders)
    powers = np.arange(n_orders)

    def excess(beta):
        est = _edc_t60((hist @ beta ** powers) ** 2)
        return 1.0 if math.isnan(est) else est - t60

    # Near beta = 1 the truncated decay curve has a spurious root, so bracket
    # outward from the Sabine value instead of using the whole interval.
    lo, hi = 1e-3, math.sqrt(1.0 - sabine_absorption(dimensions, t60))
    if hi <= lo:
        hi = 0.5
    while excess(hi) < 0:
        lo, hi = hi, 1.0 - 0.7 * (1.0 - hi)
    return float(brentq(excess, lo, hi, xtol=1e-7))


# ------------------------------------------------------------------------- impulses

@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    source_id: int = 0
    mic_id: int = 0


def _fractional_sinc(delay: float, length: int):
    """81-tap Hann-windowed sinc centred on a fractional delay, clipped to [0, length)."""
    half = SINC_TAPS // 2
    centre = int(round(delay))
    idx = np.arange(centre - half, centre + half + 1)
    t = idx - delay
    h = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / (half + 1)))
    ok = (idx >= 0) & (idx < length)
    return idx[ok], h[ok]


def simulate_rirs(room: Room, src, mics, max_length: int | None = None) -> np.ndarray:
    """Image-source RIRs from one source to several microphones, shape (n_mics, length).

    Reflections arrive at the nearest sample; the direct path uses a windowed-sinc
    fractional delay. ``max_length`` truncates the response (and skips the images
    beyond it), which is exact for any output sample earlier than ``max_length``
    after the source onset.
    """
    src = np.asarray(src, dtype=float)
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    if not room.contains(src):
        raise SimulationError(f"source {src} is outside the room")
    for m in mics:
        if not room.contains(m):
            raise SimulationError(f"microphone {m} is outside the room")
        if np.linalg.norm(m - src) < 1e-6:
            raise SimulationError("source and microphone coincide")
    length = room.rir_length if max_length is None else min(room.rir_length, int(max_length))
    n_mics = len(mics)
    out = np.zeros((n_mics, length))
    beta = room.reflection
    if beta > 0.0:
        out += _ism_kernel(room.dimensions, src, mics, beta, length, True, False, 1)

    for m, mic in enumerate(mics):
        dist = float(np.linalg.norm(mic - src))
        idx, h = _fractional_sinc(dist / C * FS, length)
        out[m, idx] += h / (4 * np.pi * dist)
    return out


def simulate_rir(room: Room, src, mic, max_length: int | None = None) -> ImpulseResponse:
    return ImpulseResponse(simulate_rirs(room, src, [mic], max_length)[0])


# ------------------------------------------------------------------------ scenarios

@dataclass(frozen=True)
class ScenarioConfig:
    """Sampling ranges for scenes. Defaults follow the training distribution."""

    room_center: tuple = (9.0, 5.0, 3.0)
    room_spread: tuple = (1.0, 1.0, 0.5)
    array_center: tuple = (4.5, 2.5, 1.5)
    array_spread: tuple = (0.5, 0.5, 0.5)
    distance_range: tuple = (1.0, 3.0)
    t60_range: tuple = (0.13, 1.0)
    snr_range: tuple = (0.0, 30.0)
    min_desired_gap: float = 25.0
    min_interferer_gap: float = 5.0
    wall_margin: float = 0.1
    random_orientation: bool = True
    max_attempts: int = 10_000

    def __post_init__(self):
        for name in ("room_center", "room_spread", "array_center", "array_spread"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ValueError(f"{name} needs 3 values, got {v}")
            object.__setattr__(self, name, v)
        for name in ("distance_range", "t60_range", "snr_range"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 2 or v[0] > v[1]:
                raise ValueError(f"{name} must be (low, high) with low <= high, got {v}")
            object.__setattr__(self, name, v)
        if self.t60_range[0] <= 0:
            raise ValueError(f"t60 must be positive, got range {self.t60_range}")
        if self.distance_range[0] <= 0:
            raise ValueError(f"source distance must be positive, got {self.distance_range}")
        if any(s < 0 for s in self.room_spread + self.array_spread):
            raise ValueError("spreads must be non-negative")
        if any(c - s <= 0 for c, s in zip(self.room_center, self.room_spread)):
            raise ValueError("room dimensions range must stay positive")

    @classmethod
    def training(cls, **kw) -> "ScenarioConfig":
        return cls(**kw)

    @classmethod
    def evaluation(cls, **kw) -> "ScenarioConfig":
        kw.setdefault("t60_range", (0.5, 0.5))
        kw.setdefault("snr_range", (20.0, 20.0))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


NOISE_TYPES = ("white", "babble")
NOISE_FIELDS = ("diffuse", "uncorrelated")


@dataclass(frozen=True)
class Scenario:
    room: Room
    array: MicArray
    desired_position: np.ndarray
    desired_class: int
    interferer_positions: tuple = ()
    snr_db: float = 20.0
    noise_kind: tuple = ("white", "uncorrelated")
    external_mic_position: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.desired_position, dtype=float)
        object.__setattr__(self, "desired_position", pos)
        object.__setattr__(
            self, "interferer_positions", tuple(np.asarray(p, dtype=float) for p in self.interferer_positions)
        )
        if self.external_mic_position is None:
            object.__setattr__(self, "external_mic_position", pos + np.array([0.0, 0.0, EXT_OFFSET]))
        else:
            object.__setattr__(self, "external_mic_position", np.asarray(self.external_mic_position, dtype=float))

    @property
    def n_interferers(self) -> int:
        return len(self.interferer_positions)

    @property
    def desired_azimuth(self) -> float:
        return azimuth_of_class(self.desired_class)

    @property
    def interferer_azimuths(self) -> list[float]:
        return [self.array.azimuth_of(p) for p in self.interferer_positions]

    @property
    def receivers(self) -> np.ndarray:
        """All 16 receiver positions: the 15 array mics then the external mic."""
        return np.vstack([self.array.absolute, self.external_mic_position[None, :]])

    @property
    def sources(self) -> list[np.ndarray]:
        return [self.desired_position, *self.interferer_positions]

    def rirs(self, max_length: int | None = None) -> np.ndarray:
        """RIRs of every source to every receiver, shape (1 + J, 16, length)."""
        rec = self.receivers
        return np.stack([simulate_rirs(self.room, s, rec, max_length) for s in self.sources])

    def to_dict(self) -> dict:
        return {
            "room": {
                "dimensions": self.room.dimensions.tolist(),
                "t60": self.room.t60,
                "absorption_override": self.room.absorption_override,
            },
            "array": {"center": self.array.center.tolist(), "orientation": self.array.orientation},
            "desired_position": self.desired_position.tolist(),
            "desired_class": int(self.desired_class),
            "interferer_positions": [p.tolist() for p in self.interferer_positions],
            "external_mic_position": self.external_mic_position.tolist(),
            "snr_db": float(self.snr_db),
            "noise_kind": list(self.noise_kind),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        r = d["room"]
        room = Room(r["dimensions"], r["t60"], r.get("absorption_override"))
        arr = build_array(d["array"]["center"], d["array"]["orientation"])
        return cls(
            room=room,
            array=arr,
            desired_position=d["desired_position"],
            desired_class=int(d["desired_class"]),
            interferer_positions=tuple(d.get("interferer_positions", ())),
            snr_db=float(d["snr_db"]),
            noise_kind=tuple(d["noise_kind"]),
            external_mic_position=d.get("external_mic_position"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _uniform(rng, center, spread):
    center, spread = np.asarray(center, dtype=float), np.asarray(spread, dtype=float)
    return center + rng.uniform(-1.0, 1.0, size=center.shape) * spread


def _place(rng, room, array, azimuth, cfg, attempts):
    """Draw a distance along ``azimuth`` until the source and its external mic fit."""
    direction = array.direction(azimuth)
    for _ in range(50):
        attempts[0] += 1
        if attempts[0] > cfg.max_attempts:
            raise SimulationError(
                f"no feasible placement after {cfg.max_attempts} attempts; check the config ranges"
            )
        dist = rng.uniform(*cfg.distance_range)
        p = array.center + dist * direction
        if room.contains(p, cfg.wall_margin) and room.contains(p + [0, 0, EXT_OFFSET], cfg.wall_margin):
            return p
    return None


def sample_scenario(cfg: ScenarioConfig, J: int, rng, noise_kind: tuple | None = None) -> Scenario:
    """Random scene with a grid-aligned desired speaker and ``J`` interferers."""
    if J < 0:
        raise ValueError(f"J must be >= 0, got {J}")
    attempts = [0]
    while True:
        if attempts[0] > cfg.max_attempts:
            raise SimulationError(
                f"no feasible placement after {cfg.max_attempts} attempts; check the config ranges"
            )
        dims = _uniform(rng, cfg.room_center, cfg.room_spread)
        center = _uniform(rng, cfg.array_center, cfg.array_spread)
        orientation = float(rng.uniform(0.0, 360.0)) if cfg.random_orientation else 0.0
        t60 = float(rng.uniform(*cfg.t60_range))
        snr = float(rng.uniform(*cfg.snr_range))
        kind = noise_kind or (
            NOISE_TYPES[int(rng.integers(2))],
            NOISE_FIELDS[int(rng.integers(2))],
        )
        desired_class = int(rng.integers(N_CLASSES))
        room = Room(dims, t60)
        array = build_array(center, orientation)
        if not all(room.contains(m, cfg.wall_margin) for m in array.absolute):
            attempts[0] += 1
            continue
        desired = _place(rng, room, array, azimuth_of_class(desired_class), cfg, attempts)
        if desired is None:
            continue
        azimuths, positions = [], []
        while len(positions) < J:
            attempts[0] += 1
            if attempts[0] > cfg.max_attempts:
                raise SimulationError(
                    f"no feasible placement after {cfg.max_attempts} attempts; check the config ranges"
                )
            az = float(rng.uniform(0.0, 360.0))
            if circular_distance(az, azimuth_of_class(desired_class)) < cfg.min_desired_gap:
                continue
            if any(circular_distance(az, a) < cfg.min_interferer_gap for a in azimuths):
                continue
            p = _place(rng, room, array, az, cfg, attempts)
            if p is None:
                continue
            azimuths.append(az)
            positions.append(p)
        return Scenario(
            room=room,
            array=array,
            desired_position=desired,
            desired_class=desired_class,
            interferer_positions=tuple(positions),
            snr_db=snr,
            noise_kind=tuple(kind),
        )


# ---------------------------------------------------------------------------- noise

def _snippet(corpus, n, rng):
    rec = corpus[int(rng.integers(len(corpus)))]
    x = rec.samples if hasattr(rec, "samples") else np.asarray(rec, dtype=float)
    if len(x) <= n:
        x = np.resize(x, n + 1)
    start = int(rng.integers(len(x) - n))
    seg = x[start:start + n]
    return seg / (np.sqrt(np.mean(seg ** 2)) + 1e-12)


def _babble(corpus, n, rng, talkers=8):
    return sum(_snippet(corpus, n, rng) for _ in range(talkers)) / math.sqrt(talkers)


def make_noise(
    kind,
    n_samples: int,
    channels,
    rng,
    corpus=None,
    n_waves: int = 36,
) -> np.ndarray:
    """Background noise, shape (n_channels, n_samples), unit average power.

    ``kind`` is (type, field) with type in {"white", "babble"} and field in
    {"diffuse", "uncorrelated"}. ``channels`` is either a channel count
    (uncorrelated only) or an (n, 3) array of receiver positions.

    The diffuse field is approximated by ``n_waves`` independent plane waves
    arriving from evenly spaced horizontal azimuths (random common rotation).
    Babble is a sum of 8 randomly offset corpus snippets per channel; diffuse
    babble gives each plane wave its own snippet.
    """
    noise_type, noise_field = kind
    if noise_type not in NOISE_TYPES or noise_field not in NOISE_FIELDS:
        raise ValueError(f"unknown noise kind {kind!r}")
    if noise_type == "babble" and not corpus:
        raise ValueError("babble noise requested but the speech corpus is empty")
    n_samples = int(n_samples)
    if noise_field == "uncorrelated":
        n_ch = channels if isinstance(channels, (int, np.integer)) else len(channels)
        if noise_type == "white":
            out = rng.standard_normal((n_ch, n_samples))
        else:
            out = np.stack([_babble(corpus, n_samples, rng) for _ in range(n_ch)])
        return out

    positions = np.asarray(channels, dtype=float)
    if positions.ndim != 2:
        raise ValueError("diffuse noise needs receiver positions")
    rel = positions - positions.mean(axis=0)
    # circular shifts stay inside the padding, so no wrapped samples reach the output
    pad = int(math.ceil(np.linalg.norm(rel, axis=1).max() / C * FS)) + 16
    nfft = n_samples + 2 * pad
    if noise_type == "white":
        waves = rng.standard_normal((n_waves, nfft))
    else:
        waves = np.stack([_snippet(corpus, nfft, rng) for _ in range(n_waves)])
    offset = rng.uniform(0.0, 360.0 / n_waves)
    az = np.radians(offset + np.arange(n_waves) * 360.0 / n_waves)
    units = np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], axis=1)
    # a wave from direction u reaches position p earlier by (p . u) / c
    delays = -(rel @ units.T) / C * FS  # (n_ch, n_waves)
    spec = np.fft.rfft(waves, axis=1)
    omega = 2 * np.pi * np.fft.rfftfreq(nfft)
    phase = np.exp(-1j * delays[:, :, None] * omega[None, None, :])
    mixed = np.einsum("wf,cwf->cf", spec, phase)
    out = np.fft.irfft(mixed, n=nfft, axis=1)[:, pad:pad + n_samples]
    return out / math.sqrt(n_waves)


# ---------------------------------------------------------------------------- render

@dataclass
class Rendered:
    """Rendered scene; every array has shape (16, n), channel 15 is the external mic."""

    channels: np.ndarray
    desired: np.ndarray
    interference: np.ndarray
    noise: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]


def _power(x) -> float:
    return float(np.mean(np.asarray(x, dtype=float) ** 2))


def render(
    scn: Scenario,
    desired_sig,
    interferer_sigs=(),
    rng=None,
    rirs: np.ndarray | None = None,
    corpus=None,
    noise: np.ndarray | None = None,
) -> Rendered:
    """Mix the scene: each receiver gets the convolved desired speech, the convolved
    interferers (rescaled to the desired source power) and noise at the scene SNR.

    The SNR is the desired-image power over the noise power, both averaged over
    the 15 array channels. ``snr_db = inf`` renders without noise.
    """
    sigs = [np.asarray(getattr(s, "samples", s), dtype=float) for s in (desired_sig, *interferer_sigs)]
    if len(sigs) - 1 != scn.n_interferers:
        raise ValueError(
            f"scenario has {scn.n_interferers} interferers but {len(sigs) - 1} signals were given"
        )
    n = min(len(s) for s in sigs)
    sigs = [s[:n] for s in sigs]
    ref = _power(sigs[0])
    for i in range(1, len(sigs)):
        p = _power(sigs[i])
        if p > 0:
            sigs[i] = sigs[i] * math.sqrt(ref / p)
    if rirs is None:
        rirs = scn.rirs()
    images = np.stack([fftconvolve(rirs[i], s[None, :], axes=1)[:, :n] for i, s in enumerate(sigs)])
    desired = images[0]
    interference = images[1:].sum(axis=0) if len(sigs) > 1 else np.zeros_like(desired)
    if np.isinf(scn.snr_db):
        noise_img = np.zeros_like(desired)
    else:
        if noise is None:
            if rng is None:
                raise ValueError("rng is required to draw noise")
            noise = make_noise(scn.noise_kind, n, scn.receivers, rng, corpus=corpus)
        noise = np.asarray(noise, dtype=float)[:, :n]
        target = _power(desired[:N_MICS]) / 10.0 ** (scn.snr_db / 10.0)
        current = _power(noise[:N_MICS])
        noise_img = noise * math.sqrt(target / current) if current > 0 else noise
    return Rendered(desired + interference + noise_img, desired, interference, noise_img)


def measured_snr(rendered: Rendered) -> float:
    return 10 * math.log10(_power(rendered.desired[:N_MICS]) / _power(rendered.noise[:N_MICS]))


def with_snr(scn: Scenario, snr_db: float) -> Scenario:
    return replace(scn, snr_db=float(snr_db))
