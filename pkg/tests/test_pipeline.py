import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from sidoa import nn
from sidoa.pipeline import (
    TrainConfig,
    TrainingLog,
    Trial,
    TrialAnalysis,
    angular_error,
    circular_median_class,
    detect_speech_frames,
    evaluate_trial,
    gen_dataset,
    gen_eval_trial,
    gen_training_sample,
    run_benchmark,
    train,
    write_metrics,
)
from sidoa.features import LAGS
from sidoa.room import C, Room, ScenarioConfig, measured_snr, render, sample_scenario
from sidoa.signal import FRAME_LEN, FS, TimeSignal


# ------------------------------------------------------------- angular error

@pytest.mark.parametrize("est, truth, err", [(355, 0, 5), (0, 355, 5), (270, 90, 180), (40, 40, 0), (10, 200, 170)])
def test_angular_error_values(est, truth, err):
    assert angular_error(est, truth) == err


@given(st.floats(0, 359.999), st.floats(0, 359.999))
def test_angular_error_properties(a, b):
    e = angular_error(a, b)
    assert 0 <= e <= 180
    assert e == angular_error(b, a)
    assert angular_error(a, a) == 0


# --------------------------------------------------------------- circular median

def test_circular_median_across_seam():
    # a naive linear median of {0, 1, 71, 70, 2} would land far from the cluster
    assert circular_median_class([71, 70, 0, 1, 2]) == 0
    assert circular_median_class([70, 71, 71, 1]) == 71


def test_circular_median_single_and_empty():
    assert circular_median_class([33]) == 33
    with pytest.raises(ValueError):
        circular_median_class([])


@given(st.lists(st.integers(0, 71), min_size=1, max_size=40), st.integers(0, 71))
def test_circular_median_rotation_equivariant(classes, shift):
    base = circular_median_class(classes)
    rotated = circular_median_class([(c + shift) % 72 for c in classes])
    # rotating the data rotates the set of minimizers; compare costs, not indices
    def cost(c, data):
        return sum(angular_error(c * 5, d * 5) for d in data)

    shifted = [(c + shift) % 72 for c in classes]
    assert cost(rotated, shifted) == pytest.approx(cost((base + shift) % 72, shifted))


@given(st.lists(st.integers(0, 71), min_size=1, max_size=40))
def test_circular_median_minimizes_deviation(classes):
    best = circular_median_class(classes)
    costs = [sum(angular_error(c * 5, d * 5) for d in classes) for c in set(classes)]
    assert sum(angular_error(best * 5, d * 5) for d in classes) == pytest.approx(min(costs))


# --------------------------------------------------------------- speech gating

def test_speech_gate_equal_frames():
    x = np.tile(np.sin(np.arange(FRAME_LEN)), 10)
    assert detect_speech_frames(TimeSignal(x, FS)).tolist() == list(range(10))


def test_speech_gate_drops_quiet_frame():
    x = np.ones(10 * FRAME_LEN)
    x[3 * FRAME_LEN:4 * FRAME_LEN] = 10 ** (-30 / 20)
    kept = detect_speech_frames(TimeSignal(x, FS))
    assert 3 not in kept and len(kept) == 9
    # the global average sits well within 4 dB of the loud frames
    power = np.r_[np.ones(9), 1e-3]
    assert 10 * np.log10(power.mean()) > -4


def test_speech_gate_empty():
    assert len(detect_speech_frames(TimeSignal(np.zeros(100), FS))) == 0


def test_speech_gate_uses_linear_mean():
    # 0 dB and -7 dB frames: the linear mean gives a -6.2 dB threshold (drops the
    # quiet frame); a dB-domain mean would give -7.5 dB and keep it
    x = np.concatenate([np.ones(FRAME_LEN), np.full(FRAME_LEN, 10 ** (-7 / 20))])
    assert detect_speech_frames(TimeSignal(x, FS)).tolist() == [0]


# ------------------------------------------------------------- training samples

def test_training_sample_shapes_and_determinism(small_corpus):
    cfg = TrainConfig.desk()
    a = gen_training_sample(cfg, np.random.default_rng(3), small_corpus)
    b = gen_training_sample(cfg, np.random.default_rng(3), small_corpus)
    assert a[0].shape == (15, 15, 24) and 0 <= a[1] < 72
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert np.all(np.abs(a[0]) <= 1 + 1e-12)


def test_speech_draw_needs_corpus():
    cfg = TrainConfig.desk(white_noise_fraction=0.0)
    with pytest.raises(ValueError, match="corpus"):
        gen_training_sample(cfg, np.random.default_rng(0))
    # white-noise-only training works without any corpus
    x, y = gen_training_sample(TrainConfig.desk(white_noise_fraction=1.0), np.random.default_rng(0))
    assert x.shape == (15, 15, 24)


def test_training_labels_cover_all_classes():
    scn_cfg = ScenarioConfig.training()
    rng = np.random.default_rng(21)
    labels = [sample_scenario(scn_cfg, 0, rng).desired_class for _ in range(1000)]
    counts = np.bincount(labels, minlength=72)
    assert np.all(counts > 0)
    assert stats.chisquare(counts).pvalue > 0.001


def test_anechoic_white_sample_matches_geometry():
    cfg = TrainConfig.desk(white_noise_fraction=1.0)
    scn = sample_scenario(ScenarioConfig.training(), 0, np.random.default_rng(5))
    from dataclasses import replace

    scn = replace(scn, room=Room(scn.room.dimensions, 0.5, absorption_override=1.0), snr_db=math.inf)
    fmap, label = gen_training_sample(cfg, np.random.default_rng(6), scenario=scn, source="white")
    assert label == scn.desired_class
    mics = scn.array.absolute
    d = np.linalg.norm(mics - scn.desired_position, axis=1) / C * FS
    for k in range(15):
        for l in range(15):
            assert abs(LAGS[np.argmax(fmap[k, l])] - (d[l] - d[k])) <= 1


def test_dataset_independent_of_chunking(small_corpus):
    cfg = TrainConfig.desk(seed=4)
    x, y = gen_dataset(cfg, 6, small_corpus)
    x2, y2 = gen_dataset(cfg, 3, small_corpus)
    assert np.array_equal(x[:3], x2) and np.array_equal(y[:3], y2)
    assert x.dtype == np.float32


# ------------------------------------------------------------------- training

def _tiny_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 15, 15, 24)).astype(np.float32), rng.integers(0, 72, n)


def test_zero_epochs_returns_init():
    m = train(TrainConfig(epochs=0, seed=5))
    ref = nn.model_init(nn.ModelConfig(), 5)
    for k in ref.params:
        assert np.array_equal(m.params[k], ref.params[k])


def test_training_deterministic_with_checkpoints(tmp_path):
    data = _tiny_data()
    cfg = TrainConfig(samples_per_epoch=64, epochs=2, seed=1)
    log = TrainingLog(tmp_path / "log.jsonl")
    train(cfg, data, out_dir=tmp_path / "a", log=log)
    train(cfg, data, out_dir=tmp_path / "b")
    for name in ("epoch_001.sdm", "epoch_002.sdm"):
        assert (tmp_path / "a/checkpoints" / name).read_bytes() == (tmp_path / "b/checkpoints" / name).read_bytes()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 4 and '"step": 4' in lines[-1]
    assert set(log.records[0]) == {"step", "epoch", "loss", "wall_time"}


def test_resume_matches_uninterrupted(tmp_path):
    data = _tiny_data()
    full = train(TrainConfig(samples_per_epoch=64, epochs=3, seed=2), data, out_dir=tmp_path / "full")
    resumed = train(TrainConfig(samples_per_epoch=64, epochs=3, seed=2), data,
                    resume=tmp_path / "full/checkpoints/epoch_001.sdm")
    _, adam = nn.load_model(tmp_path / "full/checkpoints/epoch_003.sdm", with_optimizer=True)
    assert adam.step == 6
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(white_noise_fraction=1.5)
    assert TrainConfig(desk_scale=True).samples_per_epoch == 5000


# ----------------------------------------------------------------- evaluation

def test_eval_trial_contents(small_corpus):
    t = gen_eval_trial(4, np.random.default_rng(8), small_corpus)
    assert t.channels.shape == (16, 40000) and abs(t.duration - 5.0) <= FRAME_LEN / FS
    assert len(set(t.seed)) == 5
    s = t.scenario
    assert s.n_interferers == 4 and s.room.t60 == 0.5 and s.snr_db == 20.0
    assert np.array_equal(s.external_mic_position, s.desired_position + [0, 0, 0.2])


def test_eval_trial_snr(small_corpus):
    rng = np.random.default_rng(9)
    scn = sample_scenario(ScenarioConfig.evaluation(), 0, rng)
    out = render(scn, small_corpus[0].samples[:40000], (), rng, corpus=small_corpus)
    assert measured_snr(out) == pytest.approx(20.0, abs=0.2)


def test_eval_trial_needs_enough_recordings(small_corpus):
    with pytest.raises(ValueError):
        gen_eval_trial(4, np.random.default_rng(0), small_corpus[:3])


@pytest.fixture(scope="module")
def j2_trial(small_corpus):
    return gen_eval_trial(2, np.random.default_rng(10), small_corpus, duration=2.0)


def test_evaluate_trial_result(j2_trial):
    m = nn.model_init()
    r = evaluate_trial(m, j2_trial)
    assert r.valid and 0 <= r.error_deg <= 180 and r.estimate_deg % 5 == 0
    assert np.all((r.frame_predictions >= 0) & (r.frame_predictions < 72))
    assert r.n_speech_frames >= 1


def test_zero_percentile_equals_unmasked(j2_trial):
    m = nn.model_init(seed=3)
    a = evaluate_trial(m, j2_trial, None)
    b = evaluate_trial(m, j2_trial, 0.0)
    assert np.array_equal(a.frame_predictions, b.frame_predictions)
    an = TrialAnalysis(j2_trial)
    assert np.array_equal(an.features(None, (0,)), an.features(0.0, (0,)))


def test_unmasked_path_never_reads_external_spectra(j2_trial):
    an = TrialAnalysis(j2_trial)
    an.features(None, (0,))
    assert an._ext_spectra is None
    an.features(50, (0,))
    assert an._ext_spectra is not None


def test_silent_trial_is_flagged(j2_trial):
    silent = Trial(j2_trial.scenario, np.zeros_like(j2_trial.channels), j2_trial.ground_truth_class)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = evaluate_trial(nn.model_init(), silent)
    assert not r.valid and math.isnan(r.error_deg)


def test_benchmark_bookkeeping(small_corpus, tmp_path):
    m = nn.model_init()
    res = run_benchmark(m, [0, 1], 2, [0, 50], seed=3, corpus=small_corpus, duration=1.0)
    assert len(res.summary) == 2 * 3
    assert len(res.rows) == 2 * 2 * 3
    row = res.summary[0]
    assert {"median_error", "mean_error", "invalid"} <= set(row)
    t = res.table()
    assert t[(0, "P0")] == t[(0, "unmasked")] and t[(1, "P0")] == t[(1, "unmasked")]
    again = run_benchmark(m, [0, 1], 2, [0, 50], seed=3, corpus=small_corpus, duration=1.0)
    write_metrics(res, tmp_path / "a")
    write_metrics(again, tmp_path / "b")
    for name in ("trials.csv", "summary.json", "histogram.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a/trials.csv").read_text().splitlines()[0]
    for col in ("J", "condition", "seed", "truth_deg", "estimate_deg", "error_deg", "speech_frames"):
        assert col in header.split(",")
