"""Local Gaussian model machinery shared by ILRMA and MVAE.

Layout conventions used throughout the package:

* mixture ``X``: (I, F, N) complex, channel first;
* demixing system ``W``: (F, I, I) complex, column ``W[f, :, j]`` is w_j(f),
  so the separated source is y_j(f, n) = w_j(f)^H x(f, n);
* source variances ``V``: (J, F, N) positive real.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

VARIANCE_FLOOR = 1e-10
DET_FLOOR = 1e-12
PSD_FLOOR = 1e-12
PSD_LOADING = 1e-10


def identity_demixing(n_freq: int, n_chan: int) -> np.ndarray:
    return np.tile(np.eye(n_chan, dtype=np.complex128), (n_freq, 1, 1))


def apply_demixing(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Separated spectrograms ``Y[j, f, n] = w_j(f)^H x(f, n)``."""
    if W.ndim != 3 or X.ndim != 3 or W.shape[1] != X.shape[0] or W.shape[0] != X.shape[1]:
        raise DimensionError(f"demixing {W.shape} does not fit mixture {X.shape}")
    return np.einsum("fij,ifn->jfn", W.conj(), X)


def source_log_terms(Y: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Per-source sums of ``log v + |y|^2 / v`` over all bins."""
    return (np.log(V) + (Y.real**2 + Y.imag**2) / V).sum(axis=(1, 2))


def log_likelihood(W: np.ndarray, X: np.ndarray, V: np.ndarray) -> float:
    """Log-likelihood of the demixing system up to constant terms.

    ``2N sum_f log|det W(f)^H| - sum_{f,n,j} (log v_j + |w_j^H x|^2 / v_j)``.
    """
    Y = apply_demixing(W, X)
    if V.shape != Y.shape:
        raise DimensionError(f"variances {V.shape} do not match sources {Y.shape}")
    if not np.all(V > 0):
        raise ContractError("source variances must be positive")
    n_frames = X.shape[-1]
    _, logabsdet = np.linalg.slogdet(W)
    if not np.all(np.isfinite(logabsdet)):
        raise ContractError("singular demixing matrix, log-likelihood is -inf")
    # sorted so that relabeling sources does not change the rounding
    per_source = np.sort(source_log_terms(Y, V))
    return float(2 * n_frames * logabsdet.sum() - per_source.sum())


def weighted_covariance(X: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Sigma(f) = (1/N) sum_n x(f,n) x(f,n)^H / v(f,n)``, shaped (F, I, I)."""
    if v.shape != X.shape[1:]:
        raise DimensionError(f"variance {v.shape} does not match mixture {X.shape}")
    return np.einsum("ifn,kfn->fik", X / v[None], X.conj()) / X.shape[-1]


def _regularize(sigma: np.ndarray) -> np.ndarray:
    n_chan = sigma.shape[-1]
    min_eig = np.linalg.eigvalsh(sigma)[:, 0]
    weak = min_eig <= PSD_FLOOR
    if not np.any(weak):
        return sigma
    sigma = sigma.copy()
    load = PSD_LOADING * np.trace(sigma[weak], axis1=1, axis2=2).real / n_chan
    load = np.maximum(load, PSD_LOADING)
    sigma[weak] += load[:, None, None] * np.eye(n_chan)
    return sigma


def _batched_solve(A: np.ndarray, b: np.ndarray):
    try:
        return np.linalg.solve(A, b[..., None])[..., 0], np.zeros(len(A), dtype=bool)
    except np.linalg.LinAlgError:
        out = np.zeros(b.shape, dtype=np.result_type(A, b))
        failed = np.zeros(len(A), dtype=bool)
        for f in range(len(A)):
            try:
                out[f] = np.linalg.solve(A[f], b[f])
            except np.linalg.LinAlgError:
                failed[f] = True
        return out, failed


def ip_update(W: np.ndarray, sigma: np.ndarray, j: int):
    """Iterative-projection update of column ``j`` for every frequency.

    ``w_j <- (W^H Sigma_j)^{-1} e_j`` then ``w_j <- w_j / sqrt(w_j^H Sigma_j w_j)``.

    Args:
        W: (F, I, I) demixing system (not modified).
        sigma: (F, I, I) weighted covariance of source ``j``.
        j: source index.

    Returns:
        (new W, skipped) where ``skipped`` flags frequencies whose update was
        numerically impossible; those keep their previous column.
    """
    n_freq, n_chan, _ = W.shape
    sigma = _regularize(sigma)
    A = W.conj().transpose(0, 2, 1) @ sigma
    e_j = np.zeros((n_freq, n_chan), dtype=np.complex128)
    e_j[:, j] = 1.0
    w, failed = _batched_solve(A, e_j)
    quad = np.einsum("fi,fik,fk->f", w.conj(), sigma, w).real
    failed |= ~np.isfinite(quad) | (quad <= 0) | ~np.all(np.isfinite(w), axis=1)
    safe_quad = np.where(failed, 1.0, quad)
    W_new = W.copy()
    W_new[:, :, j] = np.where(failed[:, None], W[:, :, j], w / np.sqrt(safe_quad)[:, None])
    singular = np.abs(np.linalg.det(W_new)) <= DET_FLOOR
    if np.any(singular):
        W_new[singular] = W[singular]
        failed |= singular
    return W_new, failed


def projection_back(Y: np.ndarray, x_ref: np.ndarray):
    """Rescale each source per frequency to best fit the reference channel.

    Args:
        Y: (J, F, N) separated spectrograms.
        x_ref: (F, N) reference microphone spectrogram.

    Returns:
        (rescaled Y, zero) where ``zero[j, f]`` marks all-zero components
        that received scale 0.
    """
    if Y.shape[1:] != x_ref.shape:
        raise DimensionError("sources and reference differ in (F, N)")
    energy = (Y.real**2 + Y.imag**2).sum(axis=-1)
    cross = (x_ref[None] * Y.conj()).sum(axis=-1)
    zero = energy <= 0
    coef = np.where(zero, 0.0, cross / np.where(zero, 1.0, energy))
    return coef[..., None] * Y, zero
