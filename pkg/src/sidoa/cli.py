"""Command-line entry point.

Every subcommand reads an optional YAML or JSON config, applies flag overrides
(flags win), validates everything, and only then touches the output directory.
Each run writes ``config.resolved.json`` and ``manifest.json`` (sha256 of every
data artifact) beside its outputs.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from . import nn
from .corpus import CorpusError, load_corpus, write_synthetic_corpus
from .features import read_feature_records, write_feature_records
from .pipeline import TrainConfig, TrainingLog, condition_name, gen_dataset, run_benchmark, train, write_metrics
from .room import C, Room, ScenarioConfig, estimate_t60, simulate_rir
from .signal import FS, save_audio

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_PERCENTILES = (0, 33, 50, 66, 90)
DESK = {"samples_per_epoch": 5000, "epochs": 10, "trials": 100}

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "corpus_dir": None,
    "scenario": {},
    "eval_scenario": {},
    "data": {"count": 1000},
    "train": {"samples_per_epoch": 100_000, "epochs": 10, "batch_size": 32, "lr": 1e-4,
              "white_noise_fraction": 0.5, "data_dir": None, "resume": None},
    "eval": {"model": None, "J": [0, 1, 2, 4], "trials": 5000, "percentiles": [50],
             "duration": 5.0, "histogram": True},
    "sweep": {"model": None, "J": [0, 1, 2, 4], "trials": 5000, "percentiles": list(SWEEP_PERCENTILES),
              "duration": 5.0},
    "rir": {"dimensions": [9.0, 5.0, 3.0], "t60": 0.5, "source": [3.0, 2.0, 1.3],
            "mic": [6.2, 3.1, 1.7], "absorption": None},
    "corpus": {"speakers": 8, "per_speaker": 3, "seconds": 8.0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and k not in ("scenario", "eval_scenario"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


@dataclass
class Resolved:
    command: str
    cfg: dict
    out: Path


def resolve(args) -> Resolved:
    cfg = _merge(DEFAULTS, load_config(args.config) if args.config else {})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "corpus", None):
        cfg["corpus_dir"] = args.corpus
    cmd = args.command
    sect = {"gen-data": "data", "train": "train", "eval": "eval", "sweep": "sweep",
            "rir-check": "rir", "synth-corpus": "corpus"}[cmd]
    if args.desk_scale:
        if cmd == "train":
            cfg["train"].update(samples_per_epoch=DESK["samples_per_epoch"], epochs=DESK["epochs"])
        if cmd == "gen-data":
            cfg["data"]["count"] = DESK["samples_per_epoch"]
        if cmd in ("eval", "sweep"):
            cfg[sect]["trials"] = DESK["trials"]
    for key in ("count", "samples_per_epoch", "epochs", "lr", "trials", "J", "percentiles", "model",
                "data_dir", "resume", "duration", "t60", "speakers"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[sect][key] = val
    _validate(cmd, cfg)
    return Resolved(cmd, cfg, Path(args.out))


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(cmd: str, cfg: dict) -> None:
    _check(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    _check(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs must be >= 1")
    try:
        scenario_cfg("scenario", cfg)
        scenario_cfg("eval_scenario", cfg)
        if cmd in ("train", "gen-data"):
            train_cfg(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    needs_corpus = cmd in ("eval", "sweep") or (
        cmd == "gen-data" or (
            cmd == "train" and not cfg["train"].get("data_dir") and cfg["train"]["epochs"] > 0
            and cfg["train"]["white_noise_fraction"] < 1.0))
    if needs_corpus and cmd != "synth-corpus":
        _check(cfg["corpus_dir"] is not None, f"{cmd} needs a speech corpus (--corpus or corpus_dir)")
        _check(Path(cfg["corpus_dir"]).is_dir(), f"corpus directory not found: {cfg['corpus_dir']}")
    if cmd == "gen-data":
        _check(int(cfg["data"]["count"]) >= 1, "data.count must be >= 1")
    if cmd == "train":
        t = cfg["train"]
        if t["data_dir"]:
            for name in ("features.gcc", "labels.txt"):
                _check((Path(t["data_dir"]) / name).is_file(), f"dataset file missing: {t['data_dir']}/{name}")
        if t["resume"]:
            _check(Path(t["resume"]).is_file(), f"checkpoint not found: {t['resume']}")
    if cmd in ("eval", "sweep"):
        e = cfg[cmd]
        _check(e["model"] is not None, f"{cmd} needs --model")
        _check(Path(e["model"]).is_file(), f"model file not found: {e['model']}")
        _check(int(e["trials"]) >= 1, "trials must be >= 1")
        _check(all(j in (0, 1, 2, 4) for j in e["J"]), f"J values must be in {{0, 1, 2, 4}}, got {e['J']}")
        _check(all(0 <= x <= 100 for x in e["percentiles"]), "percentiles must be in [0, 100]")
        _check(float(e["duration"]) * FS >= 256, "duration must cover at least one frame")
    if cmd == "rir-check":
        r = cfg["rir"]
        _check(len(r["dimensions"]) == 3 and min(r["dimensions"]) > 0, "rir.dimensions must be 3 positive lengths")
        _check(r["absorption"] is not None or float(r["t60"]) > 0, "rir.t60 must be positive")
        room = Room(np.array(r["dimensions"], float), float(r["t60"]) if r["t60"] else 1.0, r["absorption"])
        _check(room.contains(r["source"]) and room.contains(r["mic"]), "rir source and mic must be inside the room")
    if cmd == "synth-corpus":
        c = cfg["corpus"]
        _check(c["speakers"] >= 1 and c["per_speaker"] >= 1 and c["seconds"] > 0, "corpus sizes must be positive")


def scenario_cfg(key: str, cfg: dict) -> ScenarioConfig:
    maker = ScenarioConfig.evaluation if key == "eval_scenario" else ScenarioConfig.training
    return maker(**cfg[key])


def train_cfg(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(samples_per_epoch=int(t["samples_per_epoch"]), epochs=int(t["epochs"]),
                       batch_size=int(t["batch_size"]), lr=float(t["lr"]), seed=cfg["seed"],
                       corpus_dir=cfg["corpus_dir"], white_noise_fraction=float(t["white_noise_fraction"]),
                       jobs=cfg["jobs"])


# ------------------------------------------------------------------------ outputs

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {out} ({exc})") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _finish(res: Resolved, artifacts: list[str], extra: dict | None = None) -> None:
    manifest = {"command": res.command, "seed": res.cfg["seed"],
                "artifacts": {a: _sha256(res.out / a) for a in sorted(artifacts)}}
    manifest.update(extra or {})
    _write_json(res.out / "manifest.json", manifest)


def _corpus(cfg):
    try:
        return load_corpus(cfg["corpus_dir"])
    except CorpusError as exc:
        raise ConfigError(str(exc)) from exc


def _progress(label):
    def report(done, total):
        if done == total or done % max(1, total // 10) == 0:
            print(f"{label}: {done}/{total}", file=sys.stderr, flush=True)
    return report


# ----------------------------------------------------------------------- commands

def cmd_gen_data(res: Resolved) -> None:
    cfg = res.cfg
    tcfg = train_cfg(cfg)
    count = int(cfg["data"]["count"])
    x, y = gen_dataset(tcfg, count, _corpus(cfg), progress=_progress("gen-data"),
                       scenario_cfg=scenario_cfg("scenario", cfg))
    write_feature_records(res.out / "features.gcc", x)
    (res.out / "labels.txt").write_text("".join(f"{int(v)}\n" for v in y))
    _finish(res, ["features.gcc", "labels.txt"],
            {"count": count, "scenario_ranges": scenario_cfg("scenario", cfg).to_dict(),
             "white_noise_fraction": tcfg.white_noise_fraction})


def _read_dataset(data_dir) -> tuple[np.ndarray, np.ndarray]:
    x = read_feature_records(Path(data_dir) / "features.gcc")
    y = np.array([int(v) for v in (Path(data_dir) / "labels.txt").read_text().split()], dtype=np.int64)
    if len(y) != len(x):
        raise RuntimeError(f"{data_dir}: {len(x)} feature maps but {len(y)} labels")
    return x, y


def cmd_train(res: Resolved) -> None:
    cfg = res.cfg
    tcfg = train_cfg(cfg)
    t = cfg["train"]
    corpus = _corpus(cfg) if cfg["corpus_dir"] else None
    dataset = None
    if t["data_dir"]:
        dataset = _read_dataset(t["data_dir"])
        tcfg = TrainConfig(**{**asdict(tcfg), "samples_per_epoch": len(dataset[1])})
    elif tcfg.epochs > 0:
        dataset = gen_dataset(tcfg, tcfg.samples_per_epoch, corpus, progress=_progress("gen-data"),
                              scenario_cfg=scenario_cfg("scenario", cfg))
    log_path = res.out / "train_log.jsonl"
    if not t["resume"]:
        log_path.write_text("")
    log = TrainingLog(log_path)
    model = train(tcfg, dataset, corpus, out_dir=res.out, log=log, resume=t["resume"])
    nn.save_model(model, res.out / "model.sdm")
    ckpts = sorted(p.relative_to(res.out).as_posix() for p in (res.out / "checkpoints").glob("*.sdm"))
    _finish(res, ["model.sdm", *ckpts],
            {"param_count": nn.param_count(model), "epoch_mean_loss": log.epoch_means,
             "steps": len(log.records)})
    if log.epoch_means:
        print(f"epoch mean loss: first {log.epoch_means[0]:.4f}, last {log.epoch_means[-1]:.4f}")


def _benchmark(res: Resolved, section: str):
    cfg = res.cfg
    e = cfg[section]
    model = nn.load_model(e["model"])
    return run_benchmark(model, list(e["J"]), int(e["trials"]), list(e["percentiles"]), cfg["seed"],
                         _corpus(cfg), jobs=cfg["jobs"], duration=float(e["duration"]),
                         progress=_progress(section), scenario_cfg=scenario_cfg("eval_scenario", cfg))


def _print_summary(result) -> None:
    print(f"{'J':>2}  {'condition':<10} {'median':>8} {'mean':>8} {'invalid':>7}")
    for s in result.summary:
        print(f"{s['J']:>2}  {s['condition']:<10} {s['median_error']:8.2f} {s['mean_error']:8.2f} {s['invalid']:>7}")


def cmd_eval(res: Resolved) -> None:
    result = _benchmark(res, "eval")
    write_metrics(result, res.out, histogram=bool(res.cfg["eval"]["histogram"]))
    files = ["trials.csv", "trials.json", "summary.csv", "summary.json"]
    if res.cfg["eval"]["histogram"]:
        files.append("histogram.csv")
    _finish(res, files)
    _print_summary(result)


def cmd_sweep(res: Resolved) -> None:
    result = _benchmark(res, "sweep")
    write_metrics(result, res.out, histogram=False)
    table = result.table("median_error")
    cols = ["unmasked", *(condition_name(x) for x in res.cfg["sweep"]["percentiles"])]
    lines = ["J," + ",".join(cols)]
    for J in res.cfg["sweep"]["J"]:
        lines.append(f"{J}," + ",".join(repr(float(table[(J, c)])) for c in cols))
    (res.out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _finish(res, ["sweep.csv", "trials.csv", "trials.json", "summary.csv", "summary.json"])
    print("\n".join(lines))


def cmd_rir_check(res: Resolved) -> None:
    r = res.cfg["rir"]
    room = Room(np.array(r["dimensions"], float), float(r["t60"]), r["absorption"])
    src, mic = np.array(r["source"], float), np.array(r["mic"], float)
    taps = simulate_rir(room, src, mic).taps
    t60 = estimate_t60(taps)
    dist = float(np.linalg.norm(src - mic))
    peak = np.abs(taps)
    onset = int(np.argmax(peak >= 0.5 * peak.max()))
    np.savetxt(res.out / "rir.csv", taps, fmt="%.9e")
    save_audio(res.out / "rir.wav", taps / max(1e-12, float(peak.max())) * 0.9, FS)
    report = {"target_t60": float(r["t60"]), "estimated_t60": None if math.isnan(t60) else t60,
              "reflection": room.reflection, "absorption": room.absorption, "length": len(taps),
              "direct_delay_samples": dist / C * FS, "detected_onset": onset}
    _write_json(res.out / "rir_check.json", report)
    _finish(res, ["rir.csv", "rir.wav", "rir_check.json"])
    print(json.dumps(report, indent=2))


def cmd_synth_corpus(res: Resolved) -> None:
    c = res.cfg["corpus"]
    write_synthetic_corpus(res.out, int(c["speakers"]), int(c["per_speaker"]), float(c["seconds"]),
                           seed=res.cfg["seed"])
    wavs = sorted(p.relative_to(res.out).as_posix() for p in res.out.rglob("*.wav"))
    _finish(res, wavs)
    print(f"wrote {len(wavs)} recordings to {res.out}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "rir-check": cmd_rir_check, "synth-corpus": cmd_synth_corpus}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--desk-scale", action="store_true", help="desk-sized data, training and trial counts")
    common.add_argument("--corpus", help="speech corpus directory")

    parser = argparse.ArgumentParser(prog="sidoa", description="Signal-informed DOA estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="generate a training feature cache")
    p.add_argument("--count", type=int)
    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--data", dest="data_dir", help="feature cache from gen-data")
    p.add_argument("--samples-per-epoch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    for name, what in (("eval", "evaluate a model"), ("sweep", "masking-threshold sweep")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--model")
        p.add_argument("--trials", type=int)
        p.add_argument("--J", type=_int_list, help="comma-separated interferer counts")
        p.add_argument("--percentiles", type=_float_list, help="comma-separated mask percentiles")
        p.add_argument("--duration", type=float)
    p = sub.add_parser("rir-check", parents=[common], help="dump one RIR and its T60 estimate")
    p.add_argument("--t60", type=float)
    p = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic speech corpus")
    p.add_argument("--speakers", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        res = resolve(args)
        _prepare_out(res.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_json(res.out / "config.resolved.json", {"command": res.command, **res.cfg})
    try:
        COMMANDS[res.command](res)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI maps every failure to an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
