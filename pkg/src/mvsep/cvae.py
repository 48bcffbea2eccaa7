"""Conditional VAE source model over power spectrograms.

Encoder and decoder are fully convolutional gated CNNs running along time,
with frequency bins as channels. The class label is tiled over time and
concatenated to the input of every layer. The decoder emits a log-variance
map, i.e. the spectrogram model is a zero-mean complex Gaussian.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    AdamState,
    RunningStats,
    Tensor,
    adam_step,
    backward,
    batchnorm1d,
    broadcast_to,
    clip,
    concat,
    conv1d,
    deconv1d,
    glu,
    no_grad,
    split,
)
from .errors import ConfigurationError, ContractError, FormatError, NonFiniteError

LOGVAR_CLAMP = 20.0
LOG_INPUT_EPS = 1e-8
CHECKPOINT_MAGIC = b"MVAE"
CHECKPOINT_VERSION = 1
DTYPE_F64 = 1


@dataclass(frozen=True)
class CvaeArch:
    n_freq: int
    n_classes: int
    latent_dim: int = 16
    hidden: tuple = (64, 32)
    kernel: int = 5
    up_kernel: int = 4
    downsampling: int = 4
    min_frames: int = 8

    def __post_init__(self):
        if self.n_freq < 1 or self.n_classes < 1 or self.latent_dim < 1:
            raise ConfigurationError("n_freq, n_classes and latent_dim must be positive")
        if len(self.hidden) != 2:
            raise ConfigurationError("the network has exactly two hidden gated layers")

    def latent_frames(self, n_frames: int) -> int:
        return -(-n_frames // self.downsampling)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeArch":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def parameter_shapes(arch: CvaeArch) -> dict:
    F, C, D = arch.n_freq, arch.n_classes, arch.latent_dim
    h1, h2 = arch.hidden
    K, Ku = arch.kernel, arch.up_kernel
    return {
        "enc.conv1.weight": (2 * h1, F + C, K),
        "enc.bn1.gamma": (2 * h1,),
        "enc.bn1.beta": (2 * h1,),
        "enc.conv2.weight": (2 * h2, h1 + C, K),
        "enc.bn2.gamma": (2 * h2,),
        "enc.bn2.beta": (2 * h2,),
        "enc.head.weight": (2 * D, h2 + C, K),
        "enc.head.bias": (2 * D,),
        "dec.up1.weight": (D + C, 2 * h2, Ku),
        "dec.bn1.gamma": (2 * h2,),
        "dec.bn1.beta": (2 * h2,),
        "dec.up2.weight": (h2 + C, 2 * h1, Ku),
        "dec.bn2.gamma": (2 * h1,),
        "dec.bn2.beta": (2 * h1,),
        "dec.out.weight": (h1 + C, F, K),
        "dec.out.bias": (F,),
    }


BN_LAYERS = ("enc.bn1", "enc.bn2", "dec.bn1", "dec.bn2")


def _tile_label(c: Tensor, n: int) -> Tensor:
    b, k = c.shape
    return broadcast_to(c.reshape(b, k, 1), (b, k, n))


def _with_label(h: Tensor, c: Tensor) -> Tensor:
    return concat([h, _tile_label(c, h.shape[2])], axis=1)


def _gated(h: Tensor) -> Tensor:
    a, b = split(h, 2, axis=1)
    return glu(a, b)


class CvaeModel:
    """Parameters, batch-norm statistics and architecture of one CVAE."""

    def __init__(self, arch: CvaeArch, params: dict, stats: dict | None = None, meta: dict | None = None):
        self.arch = arch
        shapes = parameter_shapes(arch)
        if set(params) != set(shapes):
            raise ContractError("parameter set does not match the architecture")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ContractError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.stats = stats or {name: RunningStats() for name in BN_LAYERS}
        self.meta = meta or {}

    @classmethod
    def initialize(cls, arch: CvaeArch, seed: int = 0) -> "CvaeModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(arch).items():
            if name.endswith("gamma"):
                params[name] = np.ones(shape)
            elif name.endswith(("beta", "bias")):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] if "enc" in name or "out" in name else shape[0] * shape[2]
                params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
        return cls(arch, params)

    def copy(self) -> "CvaeModel":
        stats = {k: RunningStats(None if s.mean is None else s.mean.copy(),
                                 None if s.var is None else s.var.copy()) for k, s in self.stats.items()}
        return CvaeModel(self.arch, {k: v.copy() for k, v in self.params.items()}, stats, dict(self.meta))

    # ------------------------------------------------------------------
    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def _check_label(self, c: Tensor):
        if c.ndim != 2 or c.shape[1] != self.arch.n_classes:
            raise ContractError(f"label must be (batch, {self.arch.n_classes})")

    def encoder(self, power: Tensor, c: Tensor, p: dict, training: bool):
        """Differentiable encoder on a batch (B, F, N) of power spectrograms."""
        arch = self.arch
        self._check_label(c)
        if power.ndim != 3 or power.shape[1] != arch.n_freq:
            raise ContractError(f"encoder input must be (batch, {arch.n_freq}, frames)")
        if power.shape[2] < arch.min_frames:
            raise ContractError(f"need at least {arch.min_frames} frames, got {power.shape[2]}")
        pad = arch.kernel // 2
        x = (power + LOG_INPUT_EPS).log()
        h = conv1d(_with_label(x, c), p["enc.conv1.weight"], None, 1, pad)
        h = _gated(batchnorm1d(h, p["enc.bn1.gamma"], p["enc.bn1.beta"], self.stats["enc.bn1"], training))
        h = conv1d(_with_label(h, c), p["enc.conv2.weight"], None, 2, pad)
        h = _gated(batchnorm1d(h, p["enc.bn2.gamma"], p["enc.bn2.beta"], self.stats["enc.bn2"], training))
        h = conv1d(_with_label(h, c), p["enc.head.weight"], p["enc.head.bias"], 2, pad)
        mu, logvar = split(h, 2, axis=1)
        return mu, clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decoder(self, z: Tensor, c: Tensor, n_frames: int, p: dict, training: bool) -> Tensor:
        """Differentiable decoder: latent (B, D_z, N_z) to log-variance (B, F, n_frames)."""
        arch = self.arch
        self._check_label(c)
        if z.ndim != 3 or z.shape[1] != arch.latent_dim:
            raise ContractError(f"latent code must be (batch, {arch.latent_dim}, frames)")
        if z.shape[2] != arch.latent_frames(n_frames):
            raise ContractError(
                f"{z.shape[2]} latent frames cannot decode to {n_frames} frames "
                f"(expected {arch.latent_frames(n_frames)})"
            )
        half = -(-n_frames // 2)
        h = deconv1d(_with_label(z, c), p["dec.up1.weight"], None, 2, 1)[:, :, :half]
        h = _gated(batchnorm1d(h, p["dec.bn1.gamma"], p["dec.bn1.beta"], self.stats["dec.bn1"], training))
        h = deconv1d(_with_label(h, c), p["dec.up2.weight"], None, 2, 1)[:, :, :n_frames]
        h = _gated(batchnorm1d(h, p["dec.bn2.gamma"], p["dec.bn2.beta"], self.stats["dec.bn2"], training))
        out = deconv1d(_with_label(h, c), p["dec.out.weight"], p["dec.out.bias"], 1, arch.kernel // 2)
        return clip(out, -LOGVAR_CLAMP, LOGVAR_CLAMP)

    # ------------------------------------------------------------------
    def encode(self, power, c):
        """Eval-mode encoder on one (F, N) spectrogram or a (B, F, N) batch."""
        power = np.asarray(power, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        single = power.ndim == 2
        if single:
            power, c = power[None], c[None]
        with no_grad():
            mu, logvar = self.encoder(Tensor(power), Tensor(c), self.tensors(), False)
        if single:
            return mu.data[0], logvar.data[0]
        return mu.data, logvar.data

    def decode(self, z, c, n_frames: int) -> np.ndarray:
        """Eval-mode decoder returning the log-variance map."""
        z = np.asarray(z, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        single = z.ndim == 2
        if single:
            z, c = z[None], c[None]
        with no_grad():
            out = self.decoder(Tensor(z), Tensor(c), n_frames, self.tensors(), False)
        return out.data[0] if single else out.data

    def log_variance(self, z: Tensor, c: Tensor, n_frames: int) -> Tensor:
        """Differentiable eval-mode decoder on a single latent (D_z, N_z) and label (C,)."""
        out = self.decoder(z.reshape(1, *z.shape), c.reshape(1, c.shape[0]), n_frames, self.tensors(), False)
        return out.reshape(self.arch.n_freq, n_frames)


# ----------------------------------------------------------------------
# objective
def reparameterize(mu, logvar, eps):
    """``z = mu + exp(logvar / 2) * eps``; works on Tensors and arrays."""
    if np.shape(mu) != np.shape(logvar) or np.shape(mu) != np.shape(eps):
        raise ContractError("mu, logvar and eps must share a shape")
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        return mu + (logvar * 0.5).exp() * eps
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


def kl_divergence(mu, logvar):
    """Per-example KL to the standard normal prior, summed over latent entries."""
    if isinstance(mu, Tensor):
        terms = mu * mu + logvar.exp() - logvar - 1.0
        return terms.reshape(mu.shape[0], -1).sum(axis=1) * 0.5
    terms = np.square(mu) + np.exp(logvar) - logvar - 1.0
    return 0.5 * terms.reshape(np.shape(mu)[0], -1).sum(axis=1)


def reconstruction(logvar, power):
    """Per-example ``sum(-log s2 - |s|^2 / s2)`` with ``log s2 = logvar``."""
    if isinstance(logvar, Tensor):
        terms = -logvar - (-logvar).exp() * power
        return terms.reshape(logvar.shape[0], -1).sum(axis=1)
    terms = -logvar - power * np.exp(-logvar)
    return terms.reshape(np.shape(logvar)[0], -1).sum(axis=1)


def elbo_terms(model: CvaeModel, power, c, eps, params: dict | None = None, training: bool = False):
    """Per-example (elbo, reconstruction, kl) as Tensors for a batch."""
    p = model.tensors() if params is None else params
    power = power if isinstance(power, Tensor) else Tensor(power)
    c = c if isinstance(c, Tensor) else Tensor(c)
    mu, logvar = model.encoder(power, c, p, training)
    z = reparameterize(mu, logvar, np.asarray(eps, dtype=np.float64))
    out = model.decoder(z, c, power.shape[2], p, training)
    rec = reconstruction(out, power.data)
    kl = kl_divergence(mu, logvar)
    return rec - kl, rec, kl


def elbo(model: CvaeModel, power, c, eps=None, training: bool = False) -> float:
    """ELBO of one (F, N) example; ``eps=None`` means a zero draw."""
    power = np.asarray(power, dtype=np.float64)[None]
    c = np.asarray(c, dtype=np.float64)[None]
    n_z = model.arch.latent_frames(power.shape[2])
    eps = np.zeros((1, model.arch.latent_dim, n_z)) if eps is None else np.asarray(eps)[None]
    with no_grad():
        value, _, _ = elbo_terms(model, power, c, eps, training=training)
    return float(value.data[0])


def validation_elbo(model: CvaeModel, examples) -> float:
    """Mean eval-mode ELBO with a zero draw."""
    if not examples:
        return float("nan")
    return float(np.mean([elbo(model, ex.power, ex.label) for ex in examples]))


# ----------------------------------------------------------------------
# training
@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    latent_dim: int = 16
    hidden: tuple = (64, 32)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")


@dataclass
class TrainResult:
    model: CvaeModel
    log: list = field(default_factory=list)
    status: str = "ok"

    @property
    def elbo_curve(self) -> list:
        return [e["elbo"] for e in self.log]


def _batches(examples, order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        n = min(examples[i].power.shape[1] for i in idx)
        power = np.stack([examples[i].power[:, :n] for i in idx])
        label = np.stack([examples[i].label for i in idx])
        yield power, label


def train_step(model: CvaeModel, power, label, eps, adam: AdamState):
    """One Adam step on the negative mean ELBO of a batch.

    Returns per-example (elbo, kl) arrays computed before the step.
    """
    names = sorted(model.params)
    p = model.tensors(requires_grad=True)
    value, _, kl = elbo_terms(model, power, label, eps, p, training=True)
    scale = 1.0 / (power.shape[0] * power.shape[1] * power.shape[2])
    loss = value.sum() * (-scale)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("non-finite ELBO")
    grads = backward(loss, [p[k] for k in names])
    adam_step([model.params[k] for k in names], grads, adam)
    return value.data.copy(), kl.data.copy()


def train(examples, config: TrainConfig | None = None, n_classes: int | None = None,
          validation=None, progress=None) -> TrainResult:
    """Fit a CVAE to labeled unit-mean power spectrograms.

    Args:
        examples: training examples with ``power`` (F, N) and one-hot ``label``.
        config: optimization settings.
        n_classes: label size, inferred from the examples when omitted.
        validation: optional held-out examples; their zero-draw ELBO is stored
            in the model metadata.
        progress: optional callable receiving each epoch's log entry.
    """
    config = config or TrainConfig()
    if not examples:
        raise ConfigurationError("empty training set")
    n_classes = n_classes or len(examples[0].label)
    if len({ex.power.shape[0] for ex in examples}) != 1:
        raise ConfigurationError("examples differ in frequency resolution")
    arch = CvaeArch(examples[0].power.shape[0], n_classes, config.latent_dim, tuple(config.hidden))
    rng = np.random.default_rng(config.seed)
    model = CvaeModel.initialize(arch, int(rng.integers(2**32)))
    adam = AdamState(lr=config.lr)
    result = TrainResult(model)
    last_good = model.copy()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        elbos, kls = [], []
        try:
            for power, label in _batches(examples, order, config.batch_size):
                n_z = arch.latent_frames(power.shape[2])
                eps = rng.standard_normal((power.shape[0], arch.latent_dim, n_z))
                e, k = train_step(model, power, label, eps, adam)
                elbos.append(e)
                kls.append(k)
        except NonFiniteError:
            result.model = last_good
            result.status = "diverged"
            break
        entry = {
            "epoch": epoch,
            "elbo": float(np.mean(np.concatenate(elbos))),
            "kl": float(np.mean(np.concatenate(kls))),
            "kl_min": float(np.min(np.concatenate(kls))),
        }
        result.log.append(entry)
        if progress is not None:
            progress(entry)
        last_good = model.copy()

    result.model.meta = {
        "training": {
            "epochs_run": len(result.log),
            "status": result.status,
            "final_elbo": result.log[-1]["elbo"] if result.log else None,
            **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        },
        "validation_elbo": validation_elbo(result.model, validation) if validation else None,
    }
    return result


# ----------------------------------------------------------------------
# checkpoint
def _all_arrays(model: CvaeModel) -> dict:
    arrays = dict(model.params)
    for name, s in model.stats.items():
        if s.populated:
            arrays[f"{name}.running_mean"] = s.mean
            arrays[f"{name}.running_var"] = s.var
    return arrays


def save_model(model: CvaeModel, path):
    """Write the binary checkpoint (magic, version, JSON metadata, parameter table, CRC32)."""
    meta = json.dumps({"arch": model.arch.to_dict(), "meta": model.meta}, sort_keys=True).encode()
    body = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    arrays = _all_arrays(model)
    body.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw_name = name.encode()
        body.append(struct.pack("<H", len(raw_name)) + raw_name)
        body.append(struct.pack("<BB", DTYPE_F64, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    blob = b"".join(body)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw, self.pos, self.end = raw, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError("checkpoint truncated", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> CvaeModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("checkpoint too short", 0)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise FormatError("checkpoint checksum mismatch", len(raw) - 4)
    r = _Reader(raw, len(raw) - 4)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len).decode())
        arch = CvaeArch.from_dict(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}", meta_at) from exc
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dtype_at = r.pos
        dtype, rank = r.unpack("<BB")
        if dtype != DTYPE_F64:
            raise FormatError(f"unsupported dtype code {dtype}", dtype_at)
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != r.end:
        raise FormatError("trailing bytes after parameter table", r.pos)

    stats = {}
    for layer in BN_LAYERS:
        mean = arrays.pop(f"{layer}.running_mean", None)
        var = arrays.pop(f"{layer}.running_var", None)
        stats[layer] = RunningStats(mean, var)
    try:
        return CvaeModel(arch, arrays, stats, meta.get("meta", {}))
    except ContractError as exc:
        raise FormatError(f"checkpoint parameters do not match architecture: {exc}") from exc
