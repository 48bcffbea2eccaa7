"""ILRMA: NMF source variances with MM updates, interleaved with IP demixing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .lgm import (
    VARIANCE_FLOOR,
    apply_demixing,
    identity_demixing,
    ip_update,
    log_likelihood,
    weighted_covariance,
)


@dataclass
class NmfModel:
    """Per-source NMF factors.

    ``basis`` is (J, F, K) and ``activation`` is (J, K, N), both nonnegative.
    """

    basis: np.ndarray
    activation: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.basis.shape[0]

    def variances(self, floor: float = VARIANCE_FLOOR) -> np.ndarray:
        return np.maximum(self.basis @ self.activation, floor)


@dataclass
class IlrmaConfig:
    iterations: int = 100
    n_basis: int = 2
    seed: int = 0
    floor: float = VARIANCE_FLOOR
    log: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.n_basis < 1:
            raise ConfigurationError("iterations and n_basis must be >= 1")


@dataclass
class IlrmaResult:
    W: np.ndarray
    model: NmfModel
    log: list = field(default_factory=list)
    skipped: int = 0

    @property
    def loglik(self) -> list:
        return [entry["loglik"] for entry in self.log]


def nmf_variances(model: NmfModel, j: int, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """``v_j(f, n) = sum_k b_jk(f) h_jk(n)``, floored."""
    return np.maximum(model.basis[j] @ model.activation[j], floor)


def mm_update_basis(b, h, power, floor: float = VARIANCE_FLOOR):
    """One MM step on the bases of one source.

    Args:
        b: (F, K) bases.
        h: (K, N) activations.
        power: (F, N) separated power ``|y|^2``.
    """
    v = np.maximum(b @ h, floor)
    num = (power / v**2) @ h.T
    den = (1.0 / v) @ h.T
    return np.maximum(b * np.sqrt(num / den), floor)


def mm_update_activation(b, h, power, floor: float = VARIANCE_FLOOR):
    """One MM step on the activations of one source (shapes as in :func:`mm_update_basis`)."""
    v = np.maximum(b @ h, floor)
    num = b.T @ (power / v**2)
    den = b.T @ (1.0 / v)
    return np.maximum(h * np.sqrt(num / den), floor)


def is_objective(v, power) -> float:
    """Itakura-Saito style cost ``sum(log v + |y|^2 / v)``."""
    return float(np.sum(np.log(v) + power / v))


def init_nmf(n_src, n_freq, n_frames, n_basis, rng) -> NmfModel:
    basis = rng.uniform(0.1, 1.0, (n_src, n_freq, n_basis))
    activation = rng.uniform(0.1, 1.0, (n_src, n_basis, n_frames))
    return NmfModel(basis, activation)


def _log_entry(it, W, X, V, Y, skipped):
    power = (Y.real**2 + Y.imag**2).mean(axis=(1, 2))
    return {
        "iter": it,
        "loglik": log_likelihood(W, X, V),
        "per_source_power": [float(p) for p in power],
        "skipped_updates": skipped,
    }


def ilrma_run(X: np.ndarray, config: IlrmaConfig | None = None, W0=None) -> IlrmaResult:
    """Run ILRMA on a determined mixture ``X`` of shape (I, F, N).

    Each iteration updates, for every source, its demixing vector by IP,
    then its bases and its activations by MM. The log-likelihood is recorded
    before the first and after every iteration.
    """
    config = config or IlrmaConfig()
    n_chan, n_freq, n_frames = X.shape
    rng = np.random.default_rng(config.seed)
    model = init_nmf(n_chan, n_freq, n_frames, config.n_basis, rng)
    W = identity_demixing(n_freq, n_chan) if W0 is None else np.array(W0, dtype=np.complex128)
    if W.shape != (n_freq, n_chan, n_chan):
        raise ContractError("ILRMA needs as many sources as channels")
    floor = config.floor

    Y = apply_demixing(W, X)
    log = []
    if config.log:
        log.append(_log_entry(0, W, X, model.variances(floor), Y, 0))
    skipped = 0
    for it in range(1, config.iterations + 1):
        skipped_now = 0
        for j in range(n_chan):
            v = nmf_variances(model, j, floor)
            W, failed = ip_update(W, weighted_covariance(X, v), j)
            skipped_now += int(failed.sum())
        skipped += skipped_now
        Y = apply_demixing(W, X)
        power = Y.real**2 + Y.imag**2
        for j in range(n_chan):
            b, h = model.basis[j], model.activation[j]
            b = mm_update_basis(b, h, power[j], floor)
            h = mm_update_activation(b, h, power[j], floor)
            model.basis[j], model.activation[j] = b, h
        if config.log:
            log.append(_log_entry(it, W, X, model.variances(floor), Y, skipped_now))
    return IlrmaResult(W, model, log, skipped)
