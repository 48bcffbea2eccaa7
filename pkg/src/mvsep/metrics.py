"""Separation quality metrics.

SDR, SIR and SAR follow the projection decomposition of BSS-eval: an
estimate is split into the part explained by delayed copies of its own
reference, the part explained by delayed copies of the other references,
and an unexplained residual.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .audio import TimeSignal
from .errors import ContractError, DimensionError

DB_CLAMP = 100.0
DEFAULT_TAPS = 32
MAX_PERMUTED_SOURCES = 6


def _as_matrix(signals) -> np.ndarray:
    if isinstance(signals, TimeSignal):
        return signals.data
    if isinstance(signals, np.ndarray):
        return np.atleast_2d(signals).astype(np.float64)
    return np.stack([s.data[0] if isinstance(s, TimeSignal) else np.asarray(s, float) for s in signals])


def _db(num: float, den: float) -> float:
    if den <= 0:
        return DB_CLAMP
    if num <= 0:
        return -DB_CLAMP
    return float(np.clip(10 * np.log10(num / den), -DB_CLAMP, DB_CLAMP))


def delayed_basis(ref: np.ndarray, taps: int) -> np.ndarray:
    """Rows are ``ref`` delayed by 0..taps-1 samples, length ``T + taps - 1``."""
    T = ref.shape[-1]
    out = np.zeros((taps, T + taps - 1))
    for d in range(taps):
        out[d, d : d + T] = ref
    return out


def _project(basis: np.ndarray, target: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(basis.T, target, rcond=None)
    return basis.T @ coef


@dataclass
class Decomposition:
    target: np.ndarray
    interf: np.ndarray
    artif: np.ndarray

    def ratios(self):
        t, i, a = self.target, self.interf, self.artif
        sdr = _db(t @ t, (i + a) @ (i + a))
        sir = _db(t @ t, i @ i)
        sar = _db((t + i) @ (t + i), a @ a)
        return sdr, sir, sar


def decompose(estimate: np.ndarray, references: np.ndarray, j: int, taps: int = DEFAULT_TAPS,
              all_basis: np.ndarray | None = None) -> Decomposition:
    """Split ``estimate`` into target, interference and artifact for reference ``j``."""
    est = np.concatenate([estimate, np.zeros(taps - 1)])
    if all_basis is None:
        all_basis = np.concatenate([delayed_basis(r, taps) for r in references])
    own = all_basis[j * taps : (j + 1) * taps]
    target = _project(own, est)
    in_span = _project(all_basis, est)
    return Decomposition(target, in_span - target, est - in_span)


@dataclass
class EvalReport:
    sdr: list
    sir: list
    sar: list
    permutation: list
    proj_taps: int = DEFAULT_TAPS
    extra: dict = field(default_factory=dict)

    @staticmethod
    def _mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_sdr(self):
        return self._mean(self.sdr)

    @property
    def mean_sir(self):
        return self._mean(self.sir)

    @property
    def mean_sar(self):
        return self._mean(self.sar)

    def to_dict(self) -> dict:
        out = {
            "sdr": self.sdr,
            "sir": self.sir,
            "sar": self.sar,
            "permutation": list(self.permutation),
            "proj_taps": self.proj_taps,
            "mean": {"sdr": self.mean_sdr, "sir": self.mean_sir, "sar": self.mean_sar},
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "sdr", "sir", "sar"])
            for j, row in enumerate(zip(self.sdr, self.sir, self.sar)):
                w.writerow([j, *("" if v is None else repr(v) for v in row)])


def bss_eval(estimates, references, proj_taps: int = DEFAULT_TAPS, permutation=None) -> EvalReport:
    """Score estimates against references in the given order.

    Args:
        estimates: J estimates, (J, T) array or TimeSignals.
        references: J references of the same length.
        proj_taps: number of delays spanned by each reference.
        permutation: optional ``perm[k]`` = estimate index scored against
            reference ``k``; identity when omitted.

    Returns:
        EvalReport; sources with an all-zero reference get ``None`` metrics.
    """
    est, ref = _as_matrix(estimates), _as_matrix(references)
    if est.shape != ref.shape:
        raise DimensionError(f"estimates {est.shape} and references {ref.shape} differ")
    n_src = ref.shape[0]
    if n_src < 1 or proj_taps < 1:
        raise ContractError("need at least one source and one projection tap")
    perm = list(range(n_src)) if permutation is None else list(permutation)
    basis = np.concatenate([delayed_basis(r, proj_taps) for r in ref])
    sdr, sir, sar = [], [], []
    for k in range(n_src):
        if not np.any(ref[k]):
            sdr.append(None), sir.append(None), sar.append(None)
            continue
        d = decompose(est[perm[k]], ref, k, proj_taps, basis)
        for lst, val in zip((sdr, sir, sar), d.ratios()):
            lst.append(val)
    return EvalReport(sdr, sir, sar, perm, proj_taps)


def sir_matrix(estimates, references, proj_taps: int = DEFAULT_TAPS) -> np.ndarray:
    """``M[e, k]``: SIR of estimate ``e`` scored against reference ``k``."""
    est, ref = _as_matrix(estimates), _as_matrix(references)
    n_src = ref.shape[0]
    basis = np.concatenate([delayed_basis(r, proj_taps) for r in ref])
    M = np.full((est.shape[0], n_src), -DB_CLAMP)
    for e in range(est.shape[0]):
        for k in range(n_src):
            if np.any(ref[k]):
                M[e, k] = decompose(est[e], ref, k, proj_taps, basis).ratios()[1]
    return M


def align_permutation(estimates, references, proj_taps: int = DEFAULT_TAPS) -> tuple:
    """Exhaustive search for the assignment maximizing mean SIR.

    Returns ``perm`` with ``perm[k]`` the estimate matched to reference ``k``.
    Ties go to the lexicographically first permutation.
    """
    M = sir_matrix(estimates, references, proj_taps)
    n_src = M.shape[1]
    if n_src > MAX_PERMUTED_SOURCES:
        raise ContractError(f"exhaustive alignment supports at most {MAX_PERMUTED_SOURCES} sources")
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(n_src)):
        score = np.mean([M[perm[k], k] for k in range(n_src)])
        if score > best_score:
            best, best_score = perm, score
    return best


def evaluate(estimates, references, proj_taps: int = DEFAULT_TAPS) -> EvalReport:
    """Align estimates to references, then score them."""
    perm = align_permutation(estimates, references, proj_taps)
    return bss_eval(estimates, references, proj_taps, perm)


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, clamped to +-100."""
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise DimensionError("estimate and reference lengths differ")
    energy = ref @ ref
    if energy <= 0:
        raise ContractError("si_sdr needs a nonzero reference")
    target = (est @ ref) / energy * ref
    noise = est - target
    return _db(target @ target, noise @ noise)
