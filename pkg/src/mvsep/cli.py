"""Command-line front end: corpus, train, mix, separate, eval, inspect.

Exit codes: 0 on success, 1 on usage errors, 2 on data or format errors.
Every command writes only under ``--out`` and echoes its fully resolved
configuration there as ``config.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio import TimeSignal, read_wav, write_spectrogram_csv, write_wav
from .errors import MvsepError
from .metrics import DEFAULT_TAPS, bss_eval, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# name: (type, default, help, is_path)
OPTIONS = {
    "corpus": {
        "classes": (int, 4, "number of source classes (1-4)", False),
        "per_class": (int, 50, "utterances per class", False),
        "duration": (float, 1.0, "utterance length in seconds", False),
        "sample_rate": (int, 8000, "sample rate in Hz", False),
        "seed": (int, 0, "corpus seed", False),
    },
    "train": {
        "corpus": (str, None, "corpus directory (with manifest.json)", True),
        "epochs": (int, 200, "training epochs", False),
        "batch": (int, 16, "batch size", False),
        "latent_dim": (int, 16, "latent channels", False),
        "lr": (float, 1e-3, "Adam learning rate", False),
        "frame_len": (int, 128, "STFT frame length in samples", False),
        "seed": (int, 0, "training seed", False),
    },
    "mix": {
        "sources": (str, None, "comma-separated source WAV files", True),
        "classes": (_int_list, None, "synthesize sources of these class ids instead", False),
        "duration": (float, 2.0, "synthesized source length in seconds", False),
        "sample_rate": (int, 8000, "synthesized source sample rate", False),
        "mode": (str, "instantaneous", "instantaneous or convolutive", False),
        "decay_ms": (float, 80.0, "impulse-response decay time (60 dB) in ms", False),
        "snr_db": (float, None, "optional sensor-noise SNR in dB", False),
        "seed": (int, 0, "mixing seed", False),
    },
    "separate": {
        "mixture": (str, None, "multichannel mixture WAV", True),
        "algo": (str, "ilrma", "ilrma or mvae", False),
        "model": (str, None, "CVAE checkpoint (required for mvae)", True),
        "iters": (int, None, "outer iterations (ilrma 100, mvae 40)", False),
        "warm_start_iters": (int, 30, "ILRMA warm-start iterations for mvae", False),
        "fix_class": (_int_list, None, "fix source classes, e.g. 0,2", False),
        "n_basis": (int, 2, "NMF bases per source", False),
        "psi_steps": (int, 10, "latent/class gradient steps per iteration", False),
        "psi_lr": (float, 1e-2, "latent/class learning rate", False),
        "guard": (_bool, True, "monotonicity guard on latent/class steps", False),
        "frame_len": (int, None, "STFT frame length (default: model's, else 4096)", False),
        "seed": (int, 0, "separation seed", False),
        "dump_spectrograms": (_bool, False, "write separated power spectrograms as CSV", False),
    },
    "eval": {
        "estimates": (str, None, "comma-separated estimate WAVs, or a separate output dir", True),
        "references": (str, None, "comma-separated reference WAVs, or a mix output dir", True),
        "mixture": (str, None, "mixture WAV, to report SIR improvement", True),
        "proj_taps": (int, DEFAULT_TAPS, "projection length in taps", False),
    },
    "inspect": {
        "path": (str, None, "checkpoint, WAV or JSON file", True),
    },
}
REQUIRED = {"train": ["corpus"], "separate": ["mixture"], "eval": ["estimates", "references"], "inspect": ["path"]}


def build_parser() -> _Parser:
    parser = _Parser(prog="mvsep", description="Determined source separation with ILRMA and a CVAE source model.")
    parser.add_argument("--version", action="version", version=f"mvsep {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit (1 = reference path)")
        for name, (typ, default, help_text, _) in opts.items():
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, dest=name, type=typ, help=f"{help_text} (default: {default})")
    return parser


def read_config_file(path, command: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = OPTIONS[command]
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for '{command}'")
        try:
            out[key] = known[key][0](value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then command-line flags."""
    cfg = {name: spec[1] for name, spec in OPTIONS[command].items()}
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config, command))
    for name in OPTIONS[command]:
        if hasattr(args, name):
            cfg[name] = getattr(args, name)
    for name in REQUIRED.get(command, []):
        if cfg.get(name) is None:
            raise UsageError(f"mvsep {command}: --{name.replace('_', '-')} is required")
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    """Hash of the non-path settings, so reruns elsewhere hash identically."""
    portable = {k: v for k, v in cfg.items() if not OPTIONS[command][k][3]}
    blob = json.dumps({"command": command, **portable}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"input not found: {p}")
    return p


# ----------------------------------------------------------------------
def cmd_corpus(cfg, out: Path) -> dict:
    from .mixsim import DEFAULT_CLASSES, gen_corpus

    if not 1 <= cfg["classes"] <= len(DEFAULT_CLASSES):
        raise UsageError(f"--classes must be between 1 and {len(DEFAULT_CLASSES)}")
    corpus = gen_corpus(DEFAULT_CLASSES[: cfg["classes"]], cfg["per_class"], cfg["duration"],
                        cfg["sample_rate"], cfg["seed"], out_dir=out)
    return {"utterances": len(corpus.entries), "train": len(corpus.train), "eval": len(corpus.eval)}


def _load_examples(corpus_dir: Path, frame_len: int):
    from .mixsim import training_example

    manifest_path = _existing(corpus_dir / "manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
        items = manifest["utterances"]
        n_classes = len(manifest["classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"bad corpus manifest: {exc}") from exc
    train_set, eval_set = [], []
    for item in items:
        signal = read_wav(_existing(corpus_dir / item["path"]))
        ex = training_example(signal, item["class_id"], n_classes, frame_len, item["seed"])
        (train_set if item["split"] == "train" else eval_set).append(ex)
    return train_set, eval_set, manifest


def cmd_train(cfg, out: Path) -> dict:
    from .cvae import TrainConfig, save_model, train

    train_set, eval_set, manifest = _load_examples(Path(cfg["corpus"]), cfg["frame_len"])
    if len({ex.class_id for ex in train_set}) < 2:
        raise DataError("training needs at least two classes")
    config = TrainConfig(cfg["epochs"], cfg["batch"], cfg["lr"], cfg["seed"], cfg["latent_dim"])
    res = train(train_set, config, validation=eval_set)
    res.model.meta["data"] = {
        "frame_len": cfg["frame_len"],
        "sample_rate": manifest["sample_rate"],
        "class_names": [c["name"] for c in manifest["classes"]],
    }
    save_model(res.model, out / "model.mvae")
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in res.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    curve = res.elbo_curve
    return {
        "status": res.status,
        "epochs_run": len(curve),
        "elbo_first": curve[0] if curve else None,
        "elbo_last": curve[-1] if curve else None,
        "validation_elbo": res.model.meta["validation_elbo"],
        "outputs": ["model.mvae", "train_log.jsonl"],
    }


def cmd_mix(cfg, out: Path) -> dict:
    from .mixsim import DEFAULT_CLASSES, MixSpec, gen_utterance, mix, utterance_seed

    if cfg["mode"] not in ("instantaneous", "convolutive"):
        raise UsageError("--mode must be instantaneous or convolutive")
    if cfg["sources"]:
        sources = [read_wav(_existing(p)) for p in cfg["sources"].split(",")]
        if any(s.n_channels != 1 for s in sources):
            raise DataError("source files must be mono")
    elif cfg["classes"]:
        if any(not 0 <= k < len(DEFAULT_CLASSES) for k in cfg["classes"]):
            raise UsageError("unknown class id in --classes")
        sources = [
            gen_utterance(DEFAULT_CLASSES[k], cfg["duration"], cfg["sample_rate"],
                          utterance_seed(cfg["seed"] + 7919, k, j))
            for j, k in enumerate(cfg["classes"])
        ]
    else:
        raise UsageError("mvsep mix: give --sources or --classes")
    spec = MixSpec(mode=cfg["mode"], decay_ms=cfg["decay_ms"], seed=cfg["seed"], snr_db=cfg["snr_db"])
    m = mix(sources, spec)
    write_wav(out / "mixture.wav", m.signal)
    names = ["mixture.wav"]
    for j in range(m.images.shape[0]):
        write_wav(out / f"image_{j}.wav", TimeSignal(m.images[j], m.signal.sample_rate))
        names.append(f"image_{j}.wav")
    return {"channels": m.signal.n_channels, "samples": m.signal.n_samples,
            "filter_taps": int(m.filters.shape[2]), "outputs": names}


def cmd_separate(cfg, out: Path) -> dict:
    from .cvae import load_model
    from .ilrma import IlrmaConfig
    from .mvae import MvaeConfig, classify_sources
    from .pipeline import separate

    algo = cfg["algo"]
    if algo not in ("ilrma", "mvae"):
        raise UsageError("--algo must be ilrma or mvae")
    if algo == "mvae" and not cfg["model"]:
        raise UsageError("mvsep separate: --model is required with --algo mvae")
    mixture = read_wav(_existing(cfg["mixture"]))
    model = load_model(_existing(cfg["model"])) if algo == "mvae" else None
    frame_len = cfg["frame_len"]
    if frame_len is None:
        frame_len = model.meta.get("data", {}).get("frame_len", 4096) if model else 4096
    iters = cfg["iters"] or (40 if algo == "mvae" else 100)

    ilrma_cfg = IlrmaConfig(iters, cfg["n_basis"], cfg["seed"])
    fixed = tuple(cfg["fix_class"]) if cfg["fix_class"] else None
    mvae_cfg = MvaeConfig(iterations=iters, psi_steps=cfg["psi_steps"], psi_lr=cfg["psi_lr"],
                          warm_start=cfg["warm_start_iters"], seed=cfg["seed"], guard=cfg["guard"],
                          fixed_classes=fixed, n_basis=cfg["n_basis"])
    res = separate(mixture, algo, frame_len, model, ilrma_cfg, mvae_cfg)

    names = []
    for j, sig in enumerate(res.signals):
        write_wav(out / f"source_{j}.wav", TimeSignal(sig, mixture.sample_rate))
        names.append(f"source_{j}.wav")
        if cfg["dump_spectrograms"]:
            write_spectrogram_csv(out / f"source_{j}_power.csv", res.spectrograms[j], kind="power")
            names.append(f"source_{j}_power.csv")
    with open(out / "loglik.jsonl", "w") as fh:
        for entry in res.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    names.append("loglik.jsonl")
    ll = [e["loglik"] for e in res.log]
    report = {
        "algo": algo,
        "frame_len": frame_len,
        "iterations": len(ll) - 1,
        "loglik_first": ll[0],
        "loglik_final": ll[-1],
        "loglik_non_decreasing": all(b - a >= -1e-9 * (1 + abs(a)) for a, b in zip(ll, ll[1:])),
        "outputs": names,
    }
    if algo == "mvae":
        classes, conf = classify_sources(res.state)
        report["classes"] = classes
        report["class_confidence"] = conf
    return report


def _wav_list(spec: str, pattern: str) -> list:
    p = Path(spec)
    if "," not in spec and p.is_dir():
        files = sorted(p.glob(pattern), key=lambda q: int(q.stem.rsplit("_", 1)[1]))
        if not files:
            raise DataError(f"no {pattern} files in {p}")
        return files
    return [_existing(s) for s in spec.split(",")]


def _mono_stack(paths) -> np.ndarray:
    rows = []
    for path in paths:
        sig = read_wav(path)
        rows.append(sig.data[0])
    if len({len(r) for r in rows}) != 1:
        raise DataError("signals differ in length")
    return np.stack(rows)


def cmd_eval(cfg, out: Path) -> dict:
    est = _mono_stack(_wav_list(cfg["estimates"], "source_*.wav"))
    # references: mono files, or source images whose first channel is the reference microphone
    ref = _mono_stack(_wav_list(cfg["references"], "image_*.wav"))
    if est.shape != ref.shape:
        raise DataError(f"{est.shape[0]} estimates vs {ref.shape[0]} references of different shape")
    report = evaluate(est, ref, cfg["proj_taps"])
    (out / "metrics.json").write_text(report.to_json() + "\n")
    report.write_csv(out / "metrics.csv")
    summary = {"metrics": report.to_dict(), "outputs": ["metrics.json", "metrics.csv"]}
    if cfg["mixture"]:
        x = read_wav(_existing(cfg["mixture"])).data[0]
        if len(x) != ref.shape[1]:
            raise DataError("mixture length differs from the references")
        baseline = bss_eval(np.tile(x, (ref.shape[0], 1)), ref, cfg["proj_taps"])
        summary["input_sir"] = baseline.sir
        summary["sir_improvement"] = [
            None if a is None or b is None else a - b for a, b in zip(report.sir, baseline.sir)
        ]
        summary["sdr_improvement"] = [
            None if a is None or b is None else a - b for a, b in zip(report.sdr, baseline.sdr)
        ]
    return summary


def cmd_inspect(cfg, out: Path) -> dict:
    from .cvae import load_model

    path = _existing(cfg["path"])
    raw = path.read_bytes()[:4]
    if raw == b"MVAE":
        model = load_model(path)
        info = {
            "kind": "cvae-checkpoint",
            "arch": model.arch.to_dict(),
            "meta": model.meta,
            "parameters": {k: list(v.shape) for k, v in sorted(model.params.items())},
            "n_parameters": int(sum(v.size for v in model.params.values())),
        }
    elif raw == b"RIFF":
        sig = read_wav(path)
        info = {"kind": "wav", "channels": sig.n_channels, "samples": sig.n_samples,
                "sample_rate": sig.sample_rate, "peak": float(np.max(np.abs(sig.data)))}
    else:
        try:
            info = {"kind": "json", "content": json.loads(path.read_text())}
        except (ValueError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: not a checkpoint, WAV or JSON file") from exc
    _dump(out / "inspect.json", info)
    print(json.dumps(info, indent=2, sort_keys=True))
    return {"kind": info["kind"], "outputs": ["inspect.json"]}


COMMANDS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "mix": cmd_mix,
    "separate": cmd_separate,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def _run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError(parser.format_usage().strip())
    cfg = resolve_config(args.command, args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    _dump(out / "config.json", {"command": args.command, **cfg})

    threads = getattr(args, "threads", None)
    started = time.perf_counter()
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            summary = COMMANDS[args.command](cfg, out)
    else:
        summary = COMMANDS[args.command](cfg, out)
    elapsed = time.perf_counter() - started

    report = {"command": args.command, "config_hash": config_hash(args.command, cfg), **summary}
    _dump(out / "report.json", report)
    # wall-clock numbers live apart from the report so reruns stay byte-identical
    _dump(out / "timings.json", {"command": args.command, "seconds": elapsed, "threads": threads})
    return EXIT_OK


def _error_log(argv, code: int, exc: Exception):
    out = None
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            out = Path(argv[i + 1])
        elif tok.startswith("--out="):
            out = Path(tok.split("=", 1)[1])
    if out is not None and out.is_dir():
        _dump(out / "error.json", {"exit_code": code, "error": str(exc), "type": type(exc).__name__})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        _error_log(argv, EXIT_USAGE, exc)
        return EXIT_USAGE
    except (DataError, MvsepError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _error_log(argv, EXIT_DATA, exc)
        return EXIT_DATA
