"""Synthetic speaker-like sources, labeled corpora and determined mixtures.

Each source class is a harmonic signal with a class-specific pitch range,
formant-like spectral envelope and syllable-rate amplitude modulation.
Everything is a pure function of its spec and seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import TimeSignal, stft, write_wav
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class SourceClassSpec:
    class_id: int
    name: str
    pitch_range: tuple  # (low, high) Hz
    formants: tuple  # ((center Hz, bandwidth Hz, gain), ...)
    am_rate_range: tuple  # (low, high) Hz
    n_harmonics: int = 40

    def __post_init__(self):
        lo, hi = self.pitch_range
        if not 50 < lo <= hi < 500:
            raise ConfigurationError("pitch range must lie inside (50, 500) Hz")
        if any(g <= 0 or bw <= 0 for _, bw, g in self.formants):
            raise ConfigurationError("formant gains and bandwidths must be positive")


# two "female" and two "male" classes
DEFAULT_CLASSES = (
    SourceClassSpec(0, "F1", (215.0, 255.0), ((700, 200, 1.0), (1900, 250, 0.3), (3200, 300, 0.6)), (3.0, 4.5)),
    SourceClassSpec(1, "F2", (270.0, 320.0), ((1100, 300, 1.0), (2600, 300, 0.9), (3500, 250, 0.2)), (4.0, 5.5)),
    SourceClassSpec(2, "M1", (90.0, 115.0), ((350, 150, 1.0), (900, 200, 0.6), (2100, 300, 0.15)), (2.5, 3.5)),
    SourceClassSpec(3, "M2", (125.0, 155.0), ((550, 150, 0.4), (1600, 200, 1.0), (2900, 300, 0.5)), (3.5, 5.0)),
)


def spectral_envelope(spec: SourceClassSpec, freq: np.ndarray) -> np.ndarray:
    env = np.full(freq.shape, 0.02)
    for center, bw, gain in spec.formants:
        env = env + gain * np.exp(-0.5 * ((freq - center) / bw) ** 2)
    return env


def _smooth_contour(rng, t, n_terms=3, max_rate=1.5):
    rates = rng.uniform(0.2, max_rate, n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    weights = rng.uniform(0.5, 1.0, n_terms)
    c = (weights[:, None] * np.sin(2 * np.pi * rates[:, None] * t + phases[:, None])).sum(0)
    return c / weights.sum()  # in [-1, 1]


def gen_utterance(spec: SourceClassSpec, duration_s: float, sample_rate: int, seed: int) -> TimeSignal:
    """One unit-RMS utterance of class ``spec``."""
    if duration_s < 0.5:
        raise ConfigurationError("utterances must last at least 0.5 s")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    lo, hi = spec.pitch_range
    f0 = lo + (hi - lo) * 0.5 * (1 + _smooth_contour(rng, t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    nyquist_guard = 0.45 * sample_rate
    x = np.zeros(n)
    for h in range(1, spec.n_harmonics + 1):
        fh = h * f0
        if fh.min() >= nyquist_guard:
            break
        amp = spectral_envelope(spec, fh) * (fh < nyquist_guard)
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    rate = rng.uniform(*spec.am_rate_range)
    jitter = 0.3 * _smooth_contour(rng, t, max_rate=0.8)
    syllables = 0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi) + jitter)
    x *= 0.03 + syllables**1.5
    x += 0.003 * np.std(x) * rng.standard_normal(n)
    x /= np.sqrt(np.mean(x**2))
    return TimeSignal(x[None], sample_rate)


# ----------------------------------------------------------------------
# corpus
@dataclass
class TrainingExample:
    power: np.ndarray  # (F, N), unit mean
    label: np.ndarray  # (C,), one-hot
    class_id: int
    seed: int


@dataclass
class CorpusEntry:
    class_id: int
    split: str
    seed: int
    signal: TimeSignal
    path: str | None = None


@dataclass
class Corpus:
    entries: list
    train: list = field(default_factory=list)
    eval: list = field(default_factory=list)
    n_classes: int = 0
    frame_len: int = 128

    def manifest(self) -> list:
        return [
            {"class_id": e.class_id, "path": e.path, "split": e.split, "seed": e.seed}
            for e in self.entries
        ]


def normalize_power(power: np.ndarray) -> np.ndarray:
    """Scale a power spectrogram to unit mean."""
    mean = float(np.mean(power))
    if mean <= 0:
        raise ConfigurationError("cannot normalize an all-zero spectrogram")
    return power / mean


def one_hot(class_id: int, n_classes: int) -> np.ndarray:
    c = np.zeros(n_classes)
    c[class_id] = 1.0
    return c


def utterance_seed(base_seed: int, class_id: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, class_id, index]).generate_state(1)[0])


def training_example(signal: TimeSignal, class_id: int, n_classes: int, frame_len: int, seed: int = 0):
    spec = stft(signal.data[0], frame_len, frame_len // 2, signal.sample_rate).data
    power = normalize_power(spec.real**2 + spec.imag**2)
    return TrainingExample(power, one_hot(class_id, n_classes), class_id, seed)


def gen_corpus(
    specs=DEFAULT_CLASSES,
    utterances_per_class: int = 50,
    duration_s: float = 1.0,
    sample_rate: int = 8000,
    seed: int = 0,
    frame_len: int = 128,
    out_dir=None,
    train_fraction: float = 0.8,
) -> Corpus:
    """Generate a labeled corpus with a deterministic per-class train/eval split.

    The first ``round(train_fraction * utterances_per_class)`` utterances of
    each class go to the training split. With ``out_dir`` set, WAV files and
    ``manifest.json`` are written there.
    """
    n_classes = len(specs)
    n_train = int(round(train_fraction * utterances_per_class))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    corpus = Corpus([], n_classes=n_classes, frame_len=frame_len)
    for spec in specs:
        for idx in range(utterances_per_class):
            s = utterance_seed(seed, spec.class_id, idx)
            split = "train" if idx < n_train else "eval"
            signal = gen_utterance(spec, duration_s, sample_rate, s)
            path = None
            if out is not None:
                path = f"{spec.name}_{idx:03d}.wav"
                write_wav(out / path, signal, "float32")
            corpus.entries.append(CorpusEntry(spec.class_id, split, s, signal, path))
            example = training_example(signal, spec.class_id, n_classes, frame_len, s)
            (corpus.train if split == "train" else corpus.eval).append(example)
    if out is not None:
        meta = {
            "classes": [asdict(s) for s in specs],
            "sample_rate": sample_rate,
            "duration_s": duration_s,
            "seed": seed,
            "utterances": corpus.manifest(),
        }
        (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return corpus


# ----------------------------------------------------------------------
# mixing
@dataclass
class MixSpec:
    mode: str = "instantaneous"
    matrix: np.ndarray | None = None
    decay_ms: float = 80.0
    max_taps: int = 2048
    rirs: np.ndarray | None = None  # (I, J, T), overrides generated responses
    seed: int = 0
    snr_db: float | None = None


@dataclass
class Mixture:
    signal: TimeSignal  # (I, L)
    images: np.ndarray  # (J, I, L): source j as observed at microphone i
    filters: np.ndarray  # (I, J, T) mixing filters (T = 1 when instantaneous)


def random_mixing_matrix(n: int, rng) -> np.ndarray:
    while True:
        A = np.eye(n) + (rng.uniform(0.3, 0.7, (n, n)) * (1 - np.eye(n)))
        if np.linalg.cond(A) < 1e6:
            return A


def synthetic_rirs(n_mic, n_src, decay_ms, sample_rate, rng, max_taps=2048):
    """Direct-path delta plus an exponentially decaying Gaussian tail.

    ``decay_ms`` is the time for a 60 dB energy decay.
    """
    decay_s = decay_ms / 1000.0
    taps = int(min(max_taps, max(8, np.ceil(decay_s * sample_rate))))
    t = np.arange(taps) / sample_rate
    rirs = np.zeros((n_mic, n_src, taps))
    for i in range(n_mic):
        for j in range(n_src):
            delay = 0 if i == j else int(rng.integers(1, 4))
            gain = 1.0 if i == j else rng.uniform(0.4, 0.7)
            tail = 0.2 * rng.standard_normal(taps) * 10 ** (-3 * t / decay_s)
            tail[: delay + 1] = 0.0
            rirs[i, j] = gain * tail
            rirs[i, j, delay] += gain
    return rirs


def mix(sources, spec: MixSpec, sample_rate: int | None = None) -> Mixture:
    """Mix ``J`` equal-length sources into ``J`` microphone channels.

    Args:
        sources: list of single-channel TimeSignals, or an array (J, L).
        spec: mixing configuration.
    """
    if isinstance(sources, np.ndarray):
        S = np.atleast_2d(sources).astype(np.float64)
        rate = sample_rate or 8000
    else:
        lengths = {s.n_samples for s in sources}
        if len(lengths) != 1:
            raise DimensionError("sources must have equal lengths")
        S = np.stack([s.data[0] for s in sources])
        rate = sources[0].sample_rate
    n_src, length = S.shape
    rng = np.random.default_rng(spec.seed)

    if spec.rirs is not None:
        filters = np.asarray(spec.rirs, dtype=np.float64)
    elif spec.mode == "instantaneous":
        A = random_mixing_matrix(n_src, rng) if spec.matrix is None else np.asarray(spec.matrix, float)
        filters = A[:, :, None]
    elif spec.mode == "convolutive":
        filters = synthetic_rirs(n_src, n_src, spec.decay_ms, rate, rng, spec.max_taps)
    else:
        raise ConfigurationError(f"unknown mixing mode {spec.mode!r}")
    if filters.shape[:2] != (n_src, n_src):
        raise DimensionError("mixing must be determined (as many channels as sources)")
    if filters.shape[2] == 1 and np.linalg.cond(filters[:, :, 0]) >= 1e6:
        raise ConfigurationError("mixing matrix is singular or ill-conditioned")

    images = np.zeros((n_src, n_src, length))
    for j in range(n_src):
        for i in range(n_src):
            h = filters[i, j]
            if h.size == 1:
                images[j, i] = h[0] * S[j]
            else:
                images[j, i] = np.convolve(S[j], h)[:length]
    x = images.sum(axis=0)
    if spec.snr_db is not None:
        noise = rng.standard_normal(x.shape)
        noise *= np.sqrt(np.mean(x**2) / np.mean(noise**2) / 10 ** (spec.snr_db / 10))
        x = x + noise
    return Mixture(TimeSignal(x, rate), images, filters)
