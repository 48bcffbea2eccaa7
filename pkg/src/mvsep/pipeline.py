"""Waveform-level separation: STFT, ILRMA or MVAE, projection back, inverse STFT."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import ComplexSpectrogram, TimeSignal, istft, stft
from .errors import ConfigurationError
from .ilrma import IlrmaConfig, ilrma_run
from .lgm import apply_demixing, projection_back
from .mvae import MvaeConfig, mvae_separate

ALGORITHMS = ("ilrma", "mvae")


@dataclass
class SeparationOutput:
    signals: np.ndarray  # (J, L), scaled to the reference microphone
    spectrograms: np.ndarray  # (J, F, N), after projection back
    log: list
    state: object = None  # MVAE SeparationState or ILRMA result


def separate(mixture: TimeSignal, algo: str, frame_len: int, model=None,
             ilrma_config: IlrmaConfig | None = None, mvae_config: MvaeConfig | None = None,
             ref_channel: int = 0) -> SeparationOutput:
    """Separate a multichannel waveform into as many sources as channels."""
    if algo not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    X = stft(mixture, frame_len, frame_len // 2).data
    if X.ndim == 2:
        X = X[None]
    if algo == "ilrma":
        res = ilrma_run(X, ilrma_config)
        Y, log, state = apply_demixing(res.W, X), res.log, res
    else:
        if model is None:
            raise ConfigurationError("MVAE needs a trained source model")
        res = mvae_separate(X, model, mvae_config)
        Y, log, state = res.Y, res.log, res.state
    Y, _ = projection_back(Y, X[ref_channel])
    spec = ComplexSpectrogram(Y, frame_len, frame_len // 2, mixture.sample_rate)
    return SeparationOutput(istft(spec, mixture.n_samples), Y, log, state)
