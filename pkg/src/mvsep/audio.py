"""WAV file I/O and the Hamming-window STFT front end.

Only 50% overlap is supported. With a periodic Hamming window two
overlapping frames always add up to 1.08, so synthesis is a plain
overlap-add divided by that constant.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, FormatError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
MAX_CHANNELS = 8
COLA_GAIN = 1.08


@dataclass
class TimeSignal:
    """Multichannel waveform, ``data`` shaped (channels, samples)."""

    data: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2:
            raise DimensionError("signal data must be (channels, samples)")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class ComplexSpectrogram:
    """One-sided STFT, ``data`` shaped (F, N) or (channels, F, N)."""

    data: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int = 16000

    @property
    def n_freq(self) -> int:
        return self.data.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


# ----------------------------------------------------------------------
# WAV
def read_wav(path) -> TimeSignal:
    """Read a PCM16 or IEEE float32 RIFF/WAVE file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError("file too short for a RIFF header", len(raw))
    if raw[0:4] != b"RIFF":
        raise FormatError("missing RIFF tag", 0)
    if raw[8:12] != b"WAVE":
        raise FormatError("missing WAVE tag", 8)

    fmt = None
    pos = 12
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise FormatError("truncated chunk header", pos)
        tag = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if tag == b"fmt ":
            if size < 16 or body + size > len(raw):
                raise FormatError("truncated fmt chunk", body)
            code, channels, rate, _, block, bits = struct.unpack_from("<HHIIHH", raw, body)
            if code == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise FormatError("extensible fmt chunk too short", body)
                (code,) = struct.unpack_from("<H", raw, body + 24)
            fmt = (code, channels, rate, block, bits, body)
        elif tag == b"data":
            if fmt is None:
                raise FormatError("data chunk before fmt chunk", pos)
            if body + size > len(raw):
                raise FormatError(
                    f"data chunk declares {size} bytes, only {len(raw) - body} present", body
                )
            return _decode_samples(raw[body : body + size], fmt)
        pos = body + size + (size & 1)
    raise FormatError("no data chunk", len(raw))


def _decode_samples(payload: bytes, fmt) -> TimeSignal:
    code, channels, rate, block, bits, offset = fmt
    if not 1 <= channels <= MAX_CHANNELS:
        raise FormatError(f"unsupported channel count {channels}", offset + 2)
    if rate == 0:
        raise FormatError("sample rate is zero", offset + 4)
    if code == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise FormatError(f"unsupported codec (format {code}, {bits} bits)", offset)
    if block != channels * dtype.itemsize:
        raise FormatError("block alignment does not match format", offset + 12)
    n = len(payload) // block
    samples = np.frombuffer(payload[: n * block], dtype=dtype).reshape(n, channels)
    return TimeSignal(samples.T.astype(np.float64) * scale, rate)


def write_wav(path, signal: TimeSignal, fmt: str = "float32"):
    """Write ``signal`` as PCM16 (no dither) or IEEE float32."""
    data = signal.data
    channels = data.shape[0]
    if not 1 <= channels <= MAX_CHANNELS:
        raise ConfigurationError(f"WAV supports 1-{MAX_CHANNELS} channels")
    if fmt == "pcm16":
        q = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
        code, bits = WAVE_FORMAT_PCM, 16
    elif fmt == "float32":
        q = data.astype("<f4")
        code, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ConfigurationError(f"unknown WAV format {fmt!r}")
    payload = np.ascontiguousarray(q.T).tobytes()
    block = channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        code,
        channels,
        int(signal.sample_rate),
        int(signal.sample_rate) * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


# ----------------------------------------------------------------------
# STFT
def hamming(frame_len: int) -> np.ndarray:
    """Periodic Hamming window."""
    n = np.arange(frame_len)
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / frame_len)


def _check_geometry(frame_len, hop):
    if frame_len < 2 or frame_len % 2:
        raise ConfigurationError(f"frame length must be even, got {frame_len}")
    if hop != frame_len // 2:
        raise ConfigurationError("only 50% overlap (hop = frame_len/2) is supported")


def n_frames_for(length: int, hop: int) -> int:
    return -(-length // hop) + 1


def stft(x, frame_len: int, hop: int | None = None, sample_rate: int = 16000):
    """Short-time Fourier transform.

    Args:
        x: a :class:`TimeSignal` or an array shaped (samples,) or
            (channels, samples).
        frame_len: window length in samples (even).
        hop: must equal ``frame_len // 2``.

    Returns:
        ComplexSpectrogram with ``frame_len/2 + 1`` bins. Frame ``n`` starts at
        sample ``n*hop - hop``; the signal is zero-padded on both ends.
    """
    hop = frame_len // 2 if hop is None else hop
    _check_geometry(frame_len, hop)
    if isinstance(x, TimeSignal):
        sample_rate = x.sample_rate
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[-1]
    n_frames = n_frames_for(length, hop)
    padded = np.zeros(x.shape[:-1] + ((n_frames - 1) * hop + frame_len,))
    padded[..., hop : hop + length] = x
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = padded[..., idx] * hamming(frame_len)
    spec = np.fft.rfft(frames, axis=-1)
    data = np.ascontiguousarray(np.swapaxes(spec, -1, -2))
    return ComplexSpectrogram(data, frame_len, hop, sample_rate)


def istft(spec: ComplexSpectrogram, length: int) -> np.ndarray:
    """Inverse of :func:`stft`, trimmed or zero-padded to ``length`` samples."""
    if not isinstance(spec, ComplexSpectrogram):
        raise ContractError("istft needs a ComplexSpectrogram carrying its frame geometry")
    frame_len, hop = spec.frame_len, spec.hop
    _check_geometry(frame_len, hop)
    data = np.array(spec.data, dtype=np.complex128)
    if data.shape[-2] != frame_len // 2 + 1:
        raise DimensionError("bin count does not match frame length")
    data[..., 0, :] = data[..., 0, :].real
    data[..., -1, :] = data[..., -1, :].real
    frames = np.fft.irfft(np.swapaxes(data, -1, -2), n=frame_len, axis=-1)
    n_frames = frames.shape[-2]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + frame_len,))
    for n in range(n_frames):
        out[..., n * hop : n * hop + frame_len] += frames[..., n, :]
    out /= COLA_GAIN
    body = out[..., hop:]
    if body.shape[-1] >= length:
        return body[..., :length].copy()
    pad = np.zeros(body.shape[:-1] + (length - body.shape[-1],))
    return np.concatenate([body, pad], axis=-1)


def write_spectrogram_csv(path, spec, kind: str = "complex"):
    """Dump a single-channel spectrogram as CSV, rows ordered f-major.

    ``kind="complex"`` writes ``f,n,re,im``; ``kind="power"`` writes ``f,n,power``.
    """
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if data.ndim != 2:
        raise DimensionError("CSV dump takes a single (F, N) spectrogram")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if kind == "complex":
            w.writerow(["f", "n", "re", "im"])
            for f in range(data.shape[0]):
                for n in range(data.shape[1]):
                    z = data[f, n]
                    w.writerow([f, n, repr(float(z.real)), repr(float(z.imag))])
        elif kind == "power":
            w.writerow(["f", "n", "power"])
            power = data.real**2 + data.imag**2
            for f in range(data.shape[0]):
                for n in range(data.shape[1]):
                    w.writerow([f, n, repr(float(power[f, n]))])
        else:
            raise ConfigurationError(f"unknown spectrogram dump kind {kind!r}")
