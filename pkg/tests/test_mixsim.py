import json

import numpy as np
import pytest

from mvsep.audio import read_wav
from mvsep.errors import ConfigurationError, DimensionError
from mvsep.mixsim import (
    DEFAULT_CLASSES,
    MixSpec,
    SourceClassSpec,
    gen_corpus,
    gen_utterance,
    mix,
)


def spectral_centroid(x, sample_rate):
    mag = np.abs(np.fft.rfft(x))
    freq = np.fft.rfftfreq(len(x), 1 / sample_rate)
    return float((freq * mag).sum() / mag.sum())


def test_utterance_deterministic():
    a = gen_utterance(DEFAULT_CLASSES[0], 1.0, 8000, 5)
    b = gen_utterance(DEFAULT_CLASSES[0], 1.0, 8000, 5)
    np.testing.assert_array_equal(a.data, b.data)
    c = gen_utterance(DEFAULT_CLASSES[0], 1.0, 8000, 6)
    assert not np.array_equal(a.data, c.data)


@pytest.mark.parametrize("spec", DEFAULT_CLASSES)
def test_utterance_unit_rms(spec):
    x = gen_utterance(spec, 0.7, 8000, 1).data[0]
    assert abs(np.sqrt(np.mean(x**2)) - 1) < 1e-9
    assert len(x) == 5600


def test_low_pitch_class_has_lower_centroid():
    low, high = DEFAULT_CLASSES[2], DEFAULT_CLASSES[1]
    for seed in range(20):
        c_low = spectral_centroid(gen_utterance(low, 1.0, 8000, seed).data[0], 8000)
        c_high = spectral_centroid(gen_utterance(high, 1.0, 8000, seed).data[0], 8000)
        assert c_low < c_high


def test_pitch_within_class_range():
    # the strongest low-frequency peak is the fundamental
    for spec in DEFAULT_CLASSES:
        x = gen_utterance(spec, 1.0, 8000, 3).data[0]
        mag = np.abs(np.fft.rfft(x))
        freq = np.fft.rfftfreq(len(x), 1 / 8000)
        band = (freq > 60) & (freq < 1.05 * spec.pitch_range[1])
        peak = freq[band][np.argmax(mag[band])]
        assert 0.95 * spec.pitch_range[0] <= peak <= 1.05 * spec.pitch_range[1]


def test_short_duration_rejected():
    with pytest.raises(ConfigurationError):
        gen_utterance(DEFAULT_CLASSES[0], 0.4, 8000, 0)


def test_class_spec_validation():
    with pytest.raises(ConfigurationError):
        SourceClassSpec(0, "x", (40.0, 100.0), ((500, 100, 1.0),), (3, 4))
    with pytest.raises(ConfigurationError):
        SourceClassSpec(0, "x", (100.0, 200.0), ((500, 100, 0.0),), (3, 4))


# ----------------------------------------------------------------------
def test_corpus_counts_labels_and_split(tmp_path):
    corpus = gen_corpus(DEFAULT_CLASSES, utterances_per_class=5, duration_s=0.5, out_dir=tmp_path)
    assert len(corpus.train) == 4 * 4 and len(corpus.eval) == 4 * 1
    for ex in corpus.train + corpus.eval:
        assert ex.label.sum() == 1 and ex.label[ex.class_id] == 1
        assert abs(ex.power.mean() - 1) < 1e-12
        assert ex.power.shape[0] == 65
    assert {ex.class_id for ex in corpus.train} == {0, 1, 2, 3}
    assert {ex.class_id for ex in corpus.eval} == {0, 1, 2, 3}
    train_seeds = {ex.seed for ex in corpus.train}
    eval_seeds = {ex.seed for ex in corpus.eval}
    assert not train_seeds & eval_seeds

    meta = json.loads((tmp_path / "manifest.json").read_text())
    assert len(meta["utterances"]) == 20
    for item in meta["utterances"]:
        assert set(item) == {"class_id", "path", "split", "seed"}
        sig = read_wav(tmp_path / item["path"])
        assert sig.sample_rate == 8000 and sig.n_samples == 4000


def test_corpus_deterministic():
    a = gen_corpus(DEFAULT_CLASSES[:2], utterances_per_class=2, duration_s=0.5, seed=3)
    b = gen_corpus(DEFAULT_CLASSES[:2], utterances_per_class=2, duration_s=0.5, seed=3)
    for x, y in zip(a.train + a.eval, b.train + b.eval):
        np.testing.assert_array_equal(x.power, y.power)


# ----------------------------------------------------------------------
def test_identity_mixing_is_exact():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((2, 100))
    m = mix(S, MixSpec(matrix=np.eye(2)))
    np.testing.assert_array_equal(m.signal.data, S)


def test_instantaneous_matches_matrix_oracle():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((2, 50))
    A = np.array([[1, 0.5], [0.5, 1]])
    m = mix(S, MixSpec(matrix=A))
    for t in range(50):
        np.testing.assert_allclose(m.signal.data[:, t], A @ S[:, t], atol=1e-12)


def test_delta_rirs_equal_instantaneous():
    rng = np.random.default_rng(2)
    S = rng.standard_normal((2, 64))
    A = np.array([[1, 0.3], [0.7, 1]])
    a = mix(S, MixSpec(matrix=A))
    b = mix(S, MixSpec(mode="convolutive", rirs=A[:, :, None]))
    np.testing.assert_array_equal(a.signal.data, b.signal.data)
    padded = np.zeros((2, 2, 5))
    padded[:, :, 0] = A
    c = mix(S, MixSpec(mode="convolutive", rirs=padded))
    np.testing.assert_allclose(a.signal.data, c.signal.data, atol=1e-14)


def test_singular_matrix_rejected():
    with pytest.raises(ConfigurationError):
        mix(np.ones((2, 10)), MixSpec(matrix=np.array([[1, 2], [2, 4.0]])))


def test_unequal_lengths_rejected():
    a = gen_utterance(DEFAULT_CLASSES[0], 0.5, 8000, 0)
    b = gen_utterance(DEFAULT_CLASSES[1], 0.6, 8000, 0)
    with pytest.raises(DimensionError):
        mix([a, b], MixSpec())


@pytest.mark.parametrize("mode", ["instantaneous", "convolutive"])
def test_images_sum_to_mixture_and_linearity(mode):
    rng = np.random.default_rng(3)
    S1, S2 = rng.standard_normal((2, 2, 3000))
    spec = MixSpec(mode=mode, seed=4, decay_ms=200)
    m1, m2, m12 = mix(S1, spec), mix(S2, spec), mix(2 * S1 - S2, spec)
    np.testing.assert_allclose(m1.images.sum(axis=0), m1.signal.data, atol=1e-12)
    np.testing.assert_allclose(m12.signal.data, 2 * m1.signal.data - m2.signal.data, atol=1e-10)


def test_rir_length_and_decay():
    rng = np.random.default_rng(5)
    S = rng.standard_normal((2, 100))
    short = mix(S, MixSpec(mode="convolutive", decay_ms=80, seed=1)).filters
    long = mix(S, MixSpec(mode="convolutive", decay_ms=350, seed=1)).filters
    assert short.shape[2] == 640 and long.shape[2] == 2048
    assert np.all(np.isfinite(long))
    tail_energy = lambda h: np.sum(h[..., 4:] ** 2)
    assert tail_energy(long) > tail_energy(short)


def test_sensor_noise_snr():
    rng = np.random.default_rng(6)
    S = rng.standard_normal((2, 20000))
    m = mix(S, MixSpec(matrix=np.eye(2), snr_db=20.0, seed=0))
    noise = m.signal.data - m.images.sum(axis=0)
    ratio = 10 * np.log10(np.mean(m.images.sum(axis=0) ** 2) / np.mean(noise**2))
    assert abs(ratio - 20) < 1e-9


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        mix(np.ones((2, 4)), MixSpec(mode="diffuse"))
