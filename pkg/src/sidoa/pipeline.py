"""Training data, training loop, evaluation trials and benchmark tables."""

from __future__ import annotations

import csv
import functools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .features import align_external, maps_from_phases, masks_for_frames, pair_phases, phase_noise
from .room import (
    CLASS_WIDTH,
    N_MICS,
    Scenario,
    ScenarioConfig,
    azimuth_of_class,
    circular_distance,
    render,
    sample_scenario,
)
from .signal import ENERGY_EPS, FRAME_LEN, FS, TimeSignal, frame_array, frame_energies, spectra

CENTER_MIC = 7
SPEECH_MARGIN_DB = 4.0
ACTIVITY_FLOOR_DB = -60.0
SILENT_FRAME_DB = 10 * math.log10(ENERGY_EPS) + 1.0
# Training clips: 12 frames; the labelled frame is one of the last 4, and RIRs are
# cut at the clip length, which is exact for every sample of the clip.
TRAIN_CLIP_FRAMES = 12
TRAIN_PICK_FRAMES = 4


@dataclass(frozen=True)
class TrainConfig:
    samples_per_epoch: int = 100_000
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    corpus_dir: str | None = None
    white_noise_fraction: float = 0.5
    desk_scale: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.white_noise_fraction <= 1.0:
            raise ValueError("white_noise_fraction must be in [0, 1]")
        if self.samples_per_epoch < 1 or self.epochs < 0:
            raise ValueError("samples_per_epoch must be >= 1 and epochs >= 0")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.desk_scale and self.samples_per_epoch == 100_000:
            object.__setattr__(self, "samples_per_epoch", 5000)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("samples_per_epoch", 5000)
        kw.setdefault("epochs", 10)
        return cls(desk_scale=True, **kw)


@functools.lru_cache(maxsize=4)
def _cached_corpus(path: str):
    from .corpus import load_corpus
    return tuple(load_corpus(path))


def _corpus_for(cfg: TrainConfig, corpus):
    if corpus is not None:
        return corpus
    return _cached_corpus(str(cfg.corpus_dir)) if cfg.corpus_dir else None


def _sample_rng(seed: int, *keys: int):
    return np.random.default_rng([int(seed), *map(int, keys)])


def _speech_clip(corpus, n, rng):
    rec = corpus[int(rng.integers(len(corpus)))]
    x = rec.samples if hasattr(rec, "samples") else np.asarray(rec)
    if len(x) <= n:
        x = np.resize(x, n + 1)
    start = int(rng.integers(len(x) - n))
    return x[start:start + n]


# ----------------------------------------------------------------------- training

def gen_training_sample(cfg: TrainConfig, rng, corpus=None, scenario_cfg: ScenarioConfig | None = None,
                        source: str | None = None, scenario: Scenario | None = None):
    """One single-source frame: (feature map (15, 15, 24), class label).

    ``source`` forces "white" or "speech"; ``scenario`` forces the scene.
    """
    corpus = _corpus_for(cfg, corpus)
    scenario_cfg = scenario_cfg or ScenarioConfig.training()
    scn = scenario or sample_scenario(scenario_cfg, 0, rng)
    if source is None:
        source = "white" if rng.random() < cfg.white_noise_fraction else "speech"
    if source == "speech" and not corpus:
        raise ValueError("a speech training sample needs a non-empty corpus")
    n = TRAIN_CLIP_FRAMES * FRAME_LEN
    rirs = scn.rirs(max_length=n)
    noise_corpus = corpus if corpus else None
    if scn.noise_kind[0] == "babble" and not noise_corpus:
        scn = replace(scn, noise_kind=("white", scn.noise_kind[1]))
    for _ in range(50):
        sig = rng.standard_normal(n) if source == "white" else _speech_clip(corpus, n, rng)
        if not np.any(sig):
            continue
        out = render(scn, sig, (), rng, rirs=rirs, corpus=noise_corpus)
        first = TRAIN_CLIP_FRAMES - TRAIN_PICK_FRAMES
        energy = frame_energies(out.desired[0])[first:]
        active = np.nonzero(energy > ACTIVITY_FLOOR_DB)[0]
        if len(active):
            frame = first + int(active[rng.integers(len(active))])
            seg = out.channels[:N_MICS, frame * FRAME_LEN:(frame + 1) * FRAME_LEN]
            return maps_from_phases(pair_phases(spectra(seg))), scn.desired_class
    raise RuntimeError("could not find an active training frame after 50 draws")


def _dataset_chunk(args):
    cfg, corpus, scenario_cfg, start, stop = args
    xs, ys = [], []
    for i in range(start, stop):
        x, y = gen_training_sample(cfg, _sample_rng(cfg.seed, 1, i), corpus, scenario_cfg)
        xs.append(x.astype(np.float32))
        ys.append(y)
    return np.stack(xs), np.array(ys, dtype=np.int64)


def gen_dataset(cfg: TrainConfig, count: int, corpus=None, jobs: int | None = None, progress=None,
                scenario_cfg: ScenarioConfig | None = None):
    """``count`` training samples; sample ``i`` depends only on (seed, i)."""
    jobs = jobs or cfg.jobs
    corpus = _corpus_for(cfg, corpus)
    chunk = 100
    tasks = [(cfg, corpus, scenario_cfg, s, min(count, s + chunk)) for s in range(0, count, chunk)]
    parts = []
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for part in pool.map(_dataset_chunk, tasks):
                parts.append(part)
                if progress:
                    progress(sum(len(p[1]) for p in parts), count)
    else:
        for t in tasks:
            parts.append(_dataset_chunk(t))
            if progress:
                progress(sum(len(p[1]) for p in parts), count)
    if not parts:
        return np.zeros((0, N_MICS, N_MICS, 24), np.float32), np.zeros(0, np.int64)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass
class TrainingLog:
    """Per-step records (step, epoch, loss, wall_time); optionally streamed as JSON lines."""

    path: Path | None = None
    records: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)

    def add(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def train(cfg: TrainConfig, dataset=None, corpus=None, out_dir=None, log: TrainingLog | None = None,
          resume=None, model_cfg: nn.ModelConfig | None = None,
          scenario_cfg: ScenarioConfig | None = None) -> nn.Model:
    """Train the classifier with Adam on cross-entropy.

    Each epoch walks one shuffled pass over ``samples_per_epoch`` samples (the
    same generated set every epoch). Checkpoints (model + optimizer) go to
    ``out_dir/checkpoints/epoch_NNN.sdm``; ``resume`` continues from one.
    """
    corpus = _corpus_for(cfg, corpus)
    if dataset is None:
        dataset = (gen_dataset(cfg, cfg.samples_per_epoch, corpus, scenario_cfg=scenario_cfg)
                   if cfg.epochs > 0 else None)
    log = log or TrainingLog()
    start_epoch = 0
    if resume is not None:
        model, adam = nn.load_model(resume, with_optimizer=True)
        if adam is None:
            raise ValueError(f"{resume} holds no optimizer state")
        steps_per_epoch = math.ceil(len(dataset[1]) / cfg.batch_size) if dataset is not None else 1
        start_epoch = adam.step // max(steps_per_epoch, 1)
    else:
        model = nn.model_init(model_cfg or nn.ModelConfig(), cfg.seed)
        adam = nn.AdamState.for_model(model, lr=cfg.lr)
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.epochs == 0 or dataset is None:
        return model
    x_all, y_all = dataset
    n = len(y_all)
    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        rng = _sample_rng(cfg.seed, 2, epoch)
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            loss = nn.train_step(model, adam, x_all[idx].astype(np.float64), y_all[idx], rng)
            losses.append(loss)
            log.add({"step": adam.step, "epoch": epoch, "loss": loss, "wall_time": round(time.time() - t0, 3)})
        log.epoch_means.append(float(np.mean(losses)))
        if ckpt_dir is not None:
            nn.save_model(model, ckpt_dir / f"epoch_{epoch + 1:03d}.sdm", adam)
    return model


# --------------------------------------------------------------------- evaluation

@dataclass
class Trial:
    scenario: Scenario
    channels: np.ndarray  # (16, n); channel 15 is the external mic
    ground_truth_class: int
    seed: tuple = ()

    @property
    def duration(self) -> float:
        return self.channels.shape[1] / FS


@dataclass
class TrialResult:
    frame_predictions: np.ndarray
    speech_frames: np.ndarray
    estimate_deg: float
    error_deg: float
    truth_deg: float

    @property
    def valid(self) -> bool:
        return not math.isnan(self.error_deg)

    @property
    def n_speech_frames(self) -> int:
        return len(self.speech_frames)


def gen_eval_trial(J: int, rng, corpus, duration: float = 5.0,
                   scenario_cfg: ScenarioConfig | None = None) -> Trial:
    """Desired talker plus ``J`` interferers, equal source power, reverberant, noisy."""
    if corpus is None or len(corpus) < J + 1:
        raise ValueError(f"corpus has {0 if corpus is None else len(corpus)} recordings, need {J + 1}")
    scenario_cfg = scenario_cfg or ScenarioConfig.evaluation()
    scn = sample_scenario(scenario_cfg, J, rng)
    n = int(round(duration * FS))
    picks = rng.choice(len(corpus), size=J + 1, replace=False)
    sigs = [_speech_clip([corpus[int(i)]], n, rng) for i in picks]
    out = render(scn, sigs[0], sigs[1:], rng, corpus=corpus)
    return Trial(scn, out.channels, scn.desired_class, tuple(int(i) for i in picks))


def detect_speech_frames(ext) -> np.ndarray:
    """Frames whose energy is at least the global average minus 4 dB.

    The global average is the dB value of the mean linear frame power.
    """
    x = ext.samples if isinstance(ext, TimeSignal) else np.asarray(ext, dtype=float)
    frames = frame_array(x)
    if frames.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    power = np.mean(frames ** 2, axis=-1)
    energy = 10 * np.log10(power + ENERGY_EPS)
    global_db = 10 * np.log10(np.mean(power) + ENERGY_EPS)
    return np.nonzero(energy >= global_db - SPEECH_MARGIN_DB)[0]


def angular_error(est_deg, truth_deg):
    """Absolute wrapped angular error in degrees, in [0, 180]."""
    return circular_distance(est_deg, truth_deg)


def circular_median_class(classes) -> int:
    """Class minimizing the summed circular distance to all others.

    Ties go to the candidate nearest the circular mean, then to the lowest index.
    """
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size == 0:
        raise ValueError("no classes to take the median of")
    angles = classes * CLASS_WIDTH
    cand = np.unique(classes)
    cost = circular_distance(cand[:, None] * CLASS_WIDTH, angles[None, :]).sum(axis=1)
    best = cand[np.isclose(cost, cost.min(), rtol=0, atol=1e-9)]
    if len(best) > 1:
        rad = np.radians(angles)
        mean = math.degrees(math.atan2(np.sin(rad).sum(), np.cos(rad).sum()))
        near = circular_distance(best * CLASS_WIDTH, mean)
        best = best[np.isclose(near, near.min(), rtol=0, atol=1e-9)]
    return int(best.min())


class TrialAnalysis:
    """Per-trial quantities shared by every masking condition."""

    def __init__(self, trial: Trial):
        ch = trial.channels
        ext, self.lag = align_external(TimeSignal(ch[N_MICS], FS), TimeSignal(ch[CENTER_MIC], FS))
        self._ext = ext.samples
        speech = detect_speech_frames(ext)
        array_frames = frame_array(ch[:N_MICS])  # (15, F, 256)
        array_db = 10 * np.log10(np.mean(array_frames ** 2, axis=(0, 2)) + ENERGY_EPS)
        self.speech_frames = speech
        self.frames = speech[array_db[speech] > SILENT_FRAME_DB]
        self.array_spectra = spectra(array_frames[:, self.frames].transpose(1, 0, 2))
        self._phases = None
        self._plain = None
        self._ext_spectra = None
        self.truth_deg = azimuth_of_class(trial.ground_truth_class)

    @property
    def ext_spectra(self) -> np.ndarray:
        if self._ext_spectra is None:
            self._ext_spectra = spectra(frame_array(self._ext)[self.frames])
        return self._ext_spectra

    @property
    def phases(self) -> np.ndarray:
        if self._phases is None:
            self._phases = pair_phases(self.array_spectra)
        return self._phases

    def features(self, mask_percentile: float | None, seed) -> np.ndarray:
        """Maps of every used frame; frame ``f`` draws its noise from (seed, 3, f)."""
        if mask_percentile is None:
            if self._plain is None:
                self._plain = maps_from_phases(self.phases)
            return self._plain
        masks = masks_for_frames(self.ext_spectra, mask_percentile)
        rngs = [_sample_rng(*seed, 3, int(f)) for f in self.frames]
        noise = phase_noise(rngs, N_MICS, self.phases.shape[-1])
        return maps_from_phases(self.phases, masks, noise)

    def evaluate(self, model: nn.Model, mask_percentile: float | None, seed=(0,)) -> TrialResult:
        if len(self.frames) == 0:
            return TrialResult(np.zeros(0, np.int64), self.speech_frames, math.nan, math.nan, self.truth_deg)
        preds = nn.predict_batched(model, self.features(mask_percentile, seed))
        est = azimuth_of_class(circular_median_class(preds))
        return TrialResult(preds, self.speech_frames, est, float(angular_error(est, self.truth_deg)),
                           self.truth_deg)


def evaluate_trial(model: nn.Model, trial: Trial, mask_percentile: float | None = None, seed=(0,)) -> TrialResult:
    """Align, gate speech frames, classify every frame, take the circular median.

    ``seed`` keys the phase-noise streams (one per frame) of the masked path.
    """
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return TrialAnalysis(trial).evaluate(model, mask_percentile, seed)


# ---------------------------------------------------------------------- benchmark

def condition_name(x: float | None) -> str:
    return "unmasked" if x is None else f"P{x:g}"


@dataclass
class BenchmarkResult:
    rows: list  # per trial and condition
    summary: list  # per (J, condition)

    def table(self, key: str = "median_error") -> dict:
        return {(r["J"], r["condition"]): r[key] for r in self.summary}

    def errors(self, J: int, condition: str) -> np.ndarray:
        return np.array([r["error_deg"] for r in self.rows
                         if r["J"] == J and r["condition"] == condition and r["valid"]])


def _bench_trial(args):
    model, J, i, seed, conditions, corpus, duration, scenario_cfg = args
    trial = gen_eval_trial(J, _sample_rng(seed, J, i), corpus, duration, scenario_cfg)
    analysis = TrialAnalysis(trial)
    rows = []
    for x in conditions:
        res = analysis.evaluate(model, x, (seed, J, i))
        rows.append({
            "J": J,
            "trial": i,
            "condition": condition_name(x),
            "seed": f"{seed}/{J}/{i}",
            "truth_deg": res.truth_deg,
            "estimate_deg": res.estimate_deg,
            "error_deg": res.error_deg,
            "speech_frames": res.n_speech_frames,
            "used_frames": len(res.frame_predictions),
            "valid": res.valid,
        })
    return rows


def _summarize(rows, J_set, conditions):
    summary = []
    for J in J_set:
        for x in conditions:
            name = condition_name(x)
            sel = [r for r in rows if r["J"] == J and r["condition"] == name]
            err = np.array([r["error_deg"] for r in sel if r["valid"]])
            summary.append({
                "J": J,
                "condition": name,
                "trials": len(sel),
                "invalid": len(sel) - len(err),
                "median_error": float(np.median(err)) if len(err) else math.nan,
                "mean_error": float(np.mean(err)) if len(err) else math.nan,
            })
    return summary


def run_benchmark(model: nn.Model, J_set, trials_per_J: int, percentiles, seed: int, corpus,
                  jobs: int = 1, duration: float = 5.0, progress=None,
                  scenario_cfg: ScenarioConfig | None = None) -> BenchmarkResult:
    """Median / mean angular error per (J, condition) over the same trials.

    Conditions are "unmasked" plus one masked condition per percentile.
    """
    conditions = [None, *percentiles]
    tasks = [(model, int(J), i, int(seed), conditions, corpus, duration, scenario_cfg)
             for J in J_set for i in range(trials_per_J)]
    rows = []
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for k, r in enumerate(pool.map(_bench_trial, tasks, chunksize=4)):
                rows.extend(r)
                if progress:
                    progress(k + 1, len(tasks))
    else:
        for k, t in enumerate(tasks):
            rows.extend(_bench_trial(t))
            if progress:
                progress(k + 1, len(tasks))
    return BenchmarkResult(rows, _summarize(rows, list(J_set), conditions))


def write_metrics(result: BenchmarkResult, out_dir, histogram: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "trials.csv", result.rows)
    (out_dir / "trials.json").write_text(json.dumps(result.rows, indent=1, allow_nan=True))
    _write_csv(out_dir / "summary.csv", result.summary)
    (out_dir / "summary.json").write_text(json.dumps(result.summary, indent=1, allow_nan=True))
    if histogram:
        rows = []
        edges = np.arange(0.0, 185.0, CLASS_WIDTH)
        for s in result.summary:
            err = result.errors(s["J"], s["condition"])
            counts, _ = np.histogram(err, bins=edges)
            rows.extend({"J": s["J"], "condition": s["condition"], "bin_start_deg": float(e), "count": int(c)}
                        for e, c in zip(edges[:-1], counts))
        _write_csv(out_dir / "histogram.csv", rows)


def _write_csv(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


__all__ = [
    "TrainConfig", "Trial", "TrialResult", "TrainingLog", "BenchmarkResult",
    "gen_training_sample", "gen_dataset", "train", "gen_eval_trial", "detect_speech_frames",
    "angular_error", "circular_median_class", "evaluate_trial", "run_benchmark", "write_metrics",
]
