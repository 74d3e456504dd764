"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see ``conftest.py``) so that a
plain ``pytest -v`` run shows the verdict for every criterion in one place.
Criteria 8 to 10 share a desk-scale model trained once per session.
"""

import json
import time

import numpy as np
import pytest

from sidoa import nn
from sidoa.cli import main
from sidoa.corpus import synthetic_corpus, write_synthetic_corpus
from sidoa.features import (
    FRAME_LEN,
    LAGS,
    compute_mask,
    feature_map,
    gcc_phat,
)
from sidoa.pipeline import (
    TrainConfig,
    TrainingLog,
    angular_error,
    gen_dataset,
    run_benchmark,
    train,
)
from sidoa.room import C, FS, ScenarioConfig, estimate_t60, sample_scenario

RESULTS: dict[int, str] = {}

EVAL_TRIALS = 100


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    assert ok, RESULTS[n]


def _spec(x):
    return np.fft.rfft(x)


# ------------------------------------------------------------ signal level

def test_criterion_01_gcc_oracle():
    def brute(a, b):
        scores = [np.dot(a, np.roll(b, -tau)) for tau in LAGS]
        return int(LAGS[int(np.argmax(scores))])

    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    hits = 0
    for _ in range(100):
        a = rng.standard_normal(FRAME_LEN)
        # lags span -12 ... +11; a shift of +12 has no slot in the window
        d = int(rng.integers(-12, 12))
        b = np.roll(a, d)
        got = int(LAGS[np.argmax(gcc_phat(_spec(a), _spec(b)))])
        hits += got == brute(a, b) == d
    dt = time.perf_counter() - t0
    record(1, "GCC-PHAT oracle", hits == 100 and dt < 10, f"{hits}/100 in {dt:.2f} s")


def test_criterion_02_masking_identity():
    rng = np.random.default_rng(101)
    specs = _spec(rng.standard_normal((15, FRAME_LEN)))
    specs[:, 0] = -np.abs(specs[:, 0])  # negative real DC bins exercise the phase seam
    ext = _spec(rng.standard_normal(FRAME_LEN))
    plain = feature_map(specs).values
    informed = feature_map(specs, compute_mask(ext, 0.0), np.random.default_rng(5)).values
    same = plain.tobytes() == informed.tobytes()
    record(2, "masking identity at x = 0", same, "bitwise equal" if same else "maps differ")


def test_criterion_03_percentile_property():
    rng = np.random.default_rng(102)
    worst = 0.0
    for x in (33, 50, 66, 90):
        for _ in range(1000):
            mag = rng.permutation(rng.uniform(0.1, 10.0, 129))
            kept = compute_mask(mag, x).bits.sum()
            worst = max(worst, abs(kept - 129 * (100 - x) / 100))
    record(3, "percentile pass fraction", worst <= 1.0, f"worst deviation {worst:.2f} bins")


def test_criterion_04_angular_error():
    cases = [((355, 0), 5.0), ((123.0, 123.0), 0.0), ((270, 90), 180.0)]
    got = [float(angular_error(*a)) for a, _ in cases]
    ok = all(g == want for g, (_, want) in zip(got, cases))
    record(4, "angular error", ok, f"{got}")


# ------------------------------------------------------------ model level

def test_criterion_05_gradient_check():
    cfg = nn.ModelConfig(dropout_rate=0.0)
    m = nn.model_init(cfg, seed=3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, *cfg.input_shape))
    y = rng.integers(0, cfg.classes, 4)
    t0 = time.perf_counter()
    _, grads = nn.loss_and_grads(m, x, y)
    worst, bias_worst, probed = 0.0, 0.0, 0
    pick = np.random.default_rng(5)
    for name, p in m.params.items():
        flat, g = p.reshape(-1), grads[name].reshape(-1)
        is_conv_bias = name.startswith("conv") and name.endswith(".b")
        # central differences carry about 1e-11 of round-off, so only gradients
        # above 1e-6 can be resolved to 1e-4 relative error
        live = np.arange(flat.size) if is_conv_bias else np.flatnonzero(np.abs(g) > 1e-6)
        idx = live if live.size <= 40 else pick.choice(live, 40, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-5
            lp = nn.loss_and_grads(m, x, y)[0]
            flat[i] = old - 1e-5
            lm = nn.loss_and_grads(m, x, y)[0]
            flat[i] = old
            num = (lp - lm) / 2e-5
            if is_conv_bias:
                # batch norm removes any per-channel offset, so the true gradient is 0
                bias_worst = max(bias_worst, abs(num), abs(g[i]))
                continue
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i])))
            probed += 1
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and bias_worst < 1e-8 and dt < 120
    record(5, "gradient check", ok,
           f"max rel err {worst:.2e} over {probed} entries, conv bias |g| {bias_worst:.1e}, {dt:.0f} s")


def test_criterion_06_parameter_budget():
    count = nn.param_count(nn.model_init(nn.ModelConfig(conv_channels=(16, 16, 16))))
    rel = abs(count - nn.REFERENCE_PARAM_COUNT) / nn.REFERENCE_PARAM_COUNT
    ok = count == nn.AUDITED_PARAM_COUNT and rel <= 0.02
    record(6, "parameter budget", ok, f"{count} vs 36008 ({100 * rel:+.2f}%)")


def test_criterion_07_rir_fidelity():
    rng = np.random.default_rng(107)
    cfg = ScenarioConfig.training()
    ratios = []
    for _ in range(50):
        s = sample_scenario(cfg, 0, rng)
        ratios.append(estimate_t60(s.rirs()[0, 7]) / s.room.t60)
    ratios = np.array(ratios)
    onset_ok = 0
    for _ in range(100):
        s = sample_scenario(cfg, 0, rng)
        m = int(rng.integers(0, 16))
        h = np.abs(s.rirs(max_length=2048)[0, m])
        delay = np.linalg.norm(s.receivers[m] - s.desired_position) / C * FS
        onset = int(np.argmax(h >= 0.5 * h.max()))
        onset_ok += abs(onset - delay) <= 1.0
    t60_ok = int(np.sum(np.abs(ratios - 1) <= 0.25))
    record(7, "RIR fidelity", t60_ok == 50 and onset_ok == 100,
           f"T60 {t60_ok}/50 within 25% (ratio {ratios.min():.2f} to {ratios.max():.2f}), "
           f"onset {onset_ok}/100 within 1 sample")


def test_criterion_12_serialization(tmp_path):
    m = nn.model_init(nn.ModelConfig(), seed=12)
    rng = np.random.default_rng(112)
    # perturb batch-norm statistics so the round trip covers buffers as well
    for k in m.buffers:
        m.buffers[k] = m.buffers[k] + rng.uniform(0.1, 0.5, m.buffers[k].shape)
    x = rng.standard_normal((100, *m.config.input_shape))
    nn.save_model(m, tmp_path / "m.sdm")
    back = nn.load_model(tmp_path / "m.sdm")
    a, b = nn.forward(m, x), nn.forward(back, x)
    same = a.tobytes() == b.tobytes() and np.array_equal(nn.predict(m, x), nn.predict(back, x))
    record(12, "serialization round trip", same, "100/100 bit-identical" if same else "outputs differ")


# ------------------------------------------------------------ pipeline level

def test_criterion_11_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    write_synthetic_corpus(corpus, n_speakers=4, per_speaker=1, seconds=3.0, seed=3)
    common = ["--seed", "21", "--corpus", str(corpus)]
    names = {"data": ["features.gcc", "labels.txt"], "model": ["model.sdm", "train_log.jsonl"],
             "eval": ["trials.csv", "trials.json", "summary.csv", "summary.json", "histogram.csv"]}
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["gen-data", *common, "--count", "24", "--out", str(root / "data")]) == 0
        assert main(["train", *common, "--data", str(root / "data"), "--epochs", "1",
                     "--out", str(root / "model")]) == 0
        assert main(["eval", *common, "--model", str(root / "model/model.sdm"), "--trials", "2",
                     "--J", "0,2", "--duration", "1.0", "--out", str(root / "eval")]) == 0
    diffs = []
    for sub, files in names.items():
        for f in files:
            a = (tmp_path / "a" / sub / f).read_bytes()
            b = (tmp_path / "b" / sub / f).read_bytes()
            if f == "train_log.jsonl":
                # wall-clock time is the only field allowed to vary between runs
                a, b = (_strip_times(v) for v in (a, b))
            if a != b:
                diffs.append(f"{sub}/{f}")
    record(11, "determinism", not diffs, "all artifacts byte-identical" if not diffs else f"differ: {diffs}")


def _strip_times(raw: bytes) -> list:
    rows = [json.loads(line) for line in raw.decode().splitlines()]
    for r in rows:
        r.pop("wall_time", None)
    return rows


@pytest.fixture(scope="module")
def desk_model(tmp_path_factory):
    """Model trained with the unmodified desk preset on a synthetic training corpus."""
    out = tmp_path_factory.mktemp("desk")
    cfg = TrainConfig.desk(seed=0)
    corpus = synthetic_corpus(seed=0)
    t0 = time.perf_counter()
    data = gen_dataset(cfg, cfg.samples_per_epoch, corpus=corpus)
    log = TrainingLog(out / "train_log.jsonl")
    model = train(cfg, dataset=data, corpus=corpus, out_dir=out, log=log)
    return model, log.epoch_means, time.perf_counter() - t0


@pytest.fixture(scope="module")
def eval_corpus():
    # held-out talkers: a different generator seed from the training corpus
    return synthetic_corpus(seed=1)


def test_criterion_08_desk_accuracy(desk_model, eval_corpus):
    model, losses, wall = desk_model
    res = run_benchmark(model, [0], EVAL_TRIALS, [50], seed=8, corpus=eval_corpus)
    err = res.errors(0, "unmasked")
    med = float(np.median(err))
    masked = float(np.median(res.errors(0, "P50")))
    ok = med <= 10.0 and len(err) == EVAL_TRIALS and wall <= 1800
    record(8, "desk single-source accuracy", ok,
           f"median error {med:.1f} deg over {len(err)} J=0 trials (P50: {masked:.1f} deg); "
           f"desk run {wall / 60:.1f} min, "
           f"epoch loss {losses[0]:.3f} -> {losses[-1]:.3f} (chance {np.log(72):.3f})")


@pytest.fixture(scope="module")
def j2_bench(desk_model, eval_corpus):
    model, _, _ = desk_model
    return run_benchmark(model, [2], EVAL_TRIALS, [0, 33, 50, 66], seed=9, corpus=eval_corpus)


def test_criterion_09_masking_benefit(j2_bench):
    plain = float(np.median(j2_bench.errors(2, "unmasked")))
    masked = float(np.median(j2_bench.errors(2, "P50")))
    n = len(j2_bench.errors(2, "unmasked"))
    record(9, "masking benefit at J=2", masked < plain and n >= 100,
           f"median {masked:.1f} deg (P50) vs {plain:.1f} deg (unmasked) over {n} trials")


def test_criterion_10_threshold_sweep(j2_bench):
    plain = float(np.median(j2_bench.errors(2, "unmasked")))
    cells = {c: float(np.median(j2_bench.errors(2, c))) for c in ("P33", "P50", "P66")}
    rows = {(r["trial"], r["condition"]): r for r in j2_bench.rows}
    zero_equal = all(rows[(i, "P0")]["estimate_deg"] == rows[(i, "unmasked")]["estimate_deg"]
                     or (np.isnan(rows[(i, "P0")]["estimate_deg"])
                         and np.isnan(rows[(i, "unmasked")]["estimate_deg"]))
                     for i in range(EVAL_TRIALS))
    best = min(cells.values())
    record(10, "threshold sweep", best <= plain and zero_equal,
           f"best masked {best:.1f} deg of {cells}, unmasked {plain:.1f} deg; "
           f"x=0 column {'equals' if zero_equal else 'differs from'} unmasked")
