"""Multichannel separation with a CVAE source model.

Each source variance is ``v_j = g_j * exp(decode(z_j, softmax(u_j)))``. The
loop alternates, for every source, an IP update of its demixing vector, a
few Adam steps on its latent code and class logits, and the closed-form
update of its scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, clip, no_grad, softmax
from .errors import ConfigurationError, ContractError, NonFiniteError
from .ilrma import IlrmaConfig, ilrma_run
from .lgm import (
    VARIANCE_FLOOR,
    apply_demixing,
    identity_demixing,
    ip_update,
    log_likelihood,
    weighted_covariance,
)

SATURATED_LOGIT = 50.0


@dataclass
class MvaeConfig:
    iterations: int = 40
    psi_steps: int = 10
    psi_lr: float = 1e-2
    warm_start: int = 30
    seed: int = 0
    guard: bool = True
    max_halvings: int = 5
    fixed_classes: tuple | None = None
    n_basis: int = 2  # NMF bases used by the warm start
    floor: float = VARIANCE_FLOOR

    def __post_init__(self):
        if self.iterations < 1 or self.psi_steps < 1 or self.max_halvings < 0:
            raise ConfigurationError("iterations and psi_steps must be >= 1")
        if self.warm_start < 0 or self.psi_lr <= 0:
            raise ConfigurationError("warm_start must be >= 0 and psi_lr positive")


@dataclass
class SeparationState:
    """Demixing system plus per-source latent code, class logits and scale.

    ``fixed_c`` holds exact one-hot labels when classes are not estimated.
    """

    W: np.ndarray
    z: list
    u: np.ndarray
    g: np.ndarray
    fixed_c: np.ndarray | None = None
    adam: list = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return len(self.z)

    def label(self, j: int) -> np.ndarray:
        if self.fixed_c is not None:
            return self.fixed_c[j]
        return softmax(Tensor(self.u[j])).data

    def class_posteriors(self) -> np.ndarray:
        return np.stack([self.label(j) for j in range(self.n_sources)])


# ----------------------------------------------------------------------
def source_variances(model, z, u, g: float, n_frames: int, floor: float = VARIANCE_FLOOR,
                     c: np.ndarray | None = None) -> np.ndarray:
    """``g * exp(decode(z, softmax(u)))`` floored; ``c`` overrides the softmax."""
    with no_grad():
        label = Tensor(c) if c is not None else softmax(Tensor(u))
        logvar = model.log_variance(Tensor(z), label, n_frames).data
    return np.maximum(g * np.exp(logvar), floor)


def _variance_of(state, model, j, n_frames, floor):
    c = None if state.fixed_c is None else state.fixed_c[j]
    return source_variances(model, state.z[j], state.u[j], state.g[j], n_frames, floor, c)


def state_variances(state: SeparationState, model, n_frames: int, floor: float = VARIANCE_FLOOR):
    return np.stack([_variance_of(state, model, j, n_frames, floor) for j in range(state.n_sources)])


def source_objective(v: np.ndarray, power: np.ndarray) -> float:
    """The j-terms of the log-likelihood, ``-sum(log v + |y|^2 / v)``."""
    return -float(np.sum(np.log(v) + power / v))


def _psi_objective(model, z, u, g, power, floor, fixed_c, with_grad: bool):
    n_frames = power.shape[1]
    z_t = Tensor(z, requires_grad=with_grad)
    u_t = Tensor(u, requires_grad=with_grad and fixed_c is None)
    c_t = Tensor(fixed_c) if fixed_c is not None else softmax(u_t)
    logvar = model.log_variance(z_t, c_t, n_frames)
    v = clip(logvar.exp() * g, floor, np.inf)
    obj = -(v.log() + power / v).sum()
    if not with_grad:
        return obj.item(), None
    gz, gu = backward(obj, [z_t, u_t])
    return obj.item(), (gz, gu)


@dataclass
class PsiReport:
    objective: list
    accepted: int = 0
    rejected: int = 0
    non_finite: int = 0


def update_psi(state: SeparationState, model, power: np.ndarray, j: int, steps: int = 10,
               lr: float = 1e-2, guard: bool = True, max_halvings: int = 5,
               floor: float = VARIANCE_FLOOR) -> PsiReport:
    """Adam ascent on the j-terms of the log-likelihood w.r.t. ``z_j`` and ``u_j``.

    With the guard on, a step that lowers the objective is halved up to
    ``max_halvings`` times and then dropped, so the objective never decreases.

    Args:
        power: (F, N) current separated power ``|y_j|^2``.
    """
    fixed_c = None if state.fixed_c is None else state.fixed_c[j]
    while len(state.adam) <= j:
        state.adam.append(None)
    if state.adam[j] is None or state.adam[j].lr != lr:
        state.adam[j] = AdamState(lr=lr)
    adam = state.adam[j]
    z, u = state.z[j], state.u[j]
    g = state.g[j]

    with no_grad():
        current, _ = _psi_objective(model, z, u, g, power, floor, fixed_c, False)
    report = PsiReport([current])
    for _ in range(steps):
        _, (gz, gu) = _psi_objective(model, z, u, g, power, floor, fixed_c, True)
        params = [z] if fixed_c is not None else [z, u]
        # ascent: hand Adam the negated gradient
        grads = [-gz] if fixed_c is not None else [-gz, -gu]
        before = [p.copy() for p in params]
        try:
            deltas = adam_step(params, grads, adam)
        except NonFiniteError:
            report.non_finite += 1
            report.objective.append(current)
            continue
        if not guard:
            with no_grad():
                current, _ = _psi_objective(model, z, u, g, power, floor, fixed_c, False)
            report.accepted += 1
            report.objective.append(current)
            continue
        scale = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            with no_grad():
                cand, _ = _psi_objective(model, z, u, g, power, floor, fixed_c, False)
            if np.isfinite(cand) and cand >= current:
                current, accepted = cand, True
                break
            scale *= 0.5
            for p, b, d in zip(params, before, deltas):
                p[...] = b + scale * d
        if accepted:
            report.accepted += 1
        else:
            for p, b in zip(params, before):
                p[...] = b
            report.rejected += 1
        report.objective.append(current)
    return report


def update_g(state: SeparationState, model, power: np.ndarray, j: int, guard: bool = True,
             floor: float = VARIANCE_FLOOR) -> float:
    """Closed-form scale ``g_j = mean(|y_j|^2 / sigma^2)``.

    This maximizes the j-terms whenever the variance floor is inactive; with
    the guard on, a value that would lower the objective (floor active) is
    not applied.
    """
    n_frames = power.shape[1]
    c = None if state.fixed_c is None else state.fixed_c[j]
    sigma2 = source_variances(model, state.z[j], state.u[j], 1.0, n_frames, 0.0, c)
    g_new = float(np.mean(power / sigma2))
    if not np.isfinite(g_new) or g_new <= 0:
        return state.g[j]
    if guard:
        old = source_objective(np.maximum(state.g[j] * sigma2, floor), power)
        new = source_objective(np.maximum(g_new * sigma2, floor), power)
        if new < old:
            return state.g[j]
    state.g[j] = g_new
    return g_new


def classify_sources(state: SeparationState):
    """Argmax class per source (lowest index on ties) and its probability."""
    post = state.class_posteriors()
    classes = [int(np.argmax(p)) for p in post]
    return classes, [float(p[k]) for p, k in zip(post, classes)]


# ----------------------------------------------------------------------
def _log_entry(it, state, X, V, extra):
    return {
        "iter": it,
        "loglik": log_likelihood(state.W, X, V),
        "g": [float(g) for g in state.g],
        "class_posteriors": state.class_posteriors().tolist(),
        **extra,
    }


def initial_state(X: np.ndarray, model, config: MvaeConfig, W0: np.ndarray | None = None) -> SeparationState:
    """Warm-start W with ILRMA, then seed ``z`` from the encoder and ``g`` from the output power."""
    n_chan, n_freq, n_frames = X.shape
    n_classes = model.arch.n_classes
    if W0 is not None:
        W = np.array(W0, dtype=np.complex128)
    elif config.warm_start > 0:
        warm = ilrma_run(X, IlrmaConfig(config.warm_start, config.n_basis, config.seed, config.floor, log=False))
        W = warm.W
    else:
        W = identity_demixing(n_freq, n_chan)
    fixed_c = None
    if config.fixed_classes is not None:
        if len(config.fixed_classes) != n_chan:
            raise ConfigurationError("need one fixed class per source")
        if any(not 0 <= k < n_classes for k in config.fixed_classes):
            raise ConfigurationError("fixed class outside the model's class range")
        fixed_c = np.eye(n_classes)[list(config.fixed_classes)]
    u = np.zeros((n_chan, n_classes))
    if fixed_c is not None:
        u = SATURATED_LOGIT * fixed_c
    Y = apply_demixing(W, X)
    z, g = [], np.ones(n_chan)
    for j in range(n_chan):
        power = Y[j].real**2 + Y[j].imag**2
        norm = float(np.mean(power))
        if not np.isfinite(norm) or norm <= 0:
            norm = 1.0
        c = fixed_c[j] if fixed_c is not None else np.full(n_classes, 1.0 / n_classes)
        mu, _ = model.encode(power / norm, c)
        z.append(np.array(mu))
        g[j] = norm
    return SeparationState(W, z, u, g, fixed_c)


@dataclass
class MvaeResult:
    Y: np.ndarray
    state: SeparationState
    log: list


def mvae_separate(X: np.ndarray, model, config: MvaeConfig | None = None,
                  state: SeparationState | None = None) -> MvaeResult:
    """Separate a determined mixture ``X`` (I, F, N).

    Returns the separated spectrograms before scale restoration, the final
    state and one log entry per outer iteration (plus the initial one).
    """
    config = config or MvaeConfig()
    n_chan, n_freq, n_frames = X.shape
    if model.arch.n_freq != n_freq:
        raise ContractError(f"model expects {model.arch.n_freq} bins, mixture has {n_freq}")
    state = state or initial_state(X, model, config)
    if state.W.shape != (n_freq, n_chan, n_chan):
        raise ContractError("MVAE needs as many sources as channels")
    floor = config.floor

    V = state_variances(state, model, n_frames, floor)
    log = [_log_entry(0, state, X, V, {"psi_rejected": 0, "skipped_updates": 0})]
    for it in range(1, config.iterations + 1):
        rejected = skipped = 0
        for j in range(n_chan):
            state.W, failed = ip_update(state.W, weighted_covariance(X, V[j]), j)
            skipped += int(failed.sum())
            y = np.einsum("fi,ifn->fn", state.W[:, :, j].conj(), X)
            power = y.real**2 + y.imag**2
            rep = update_psi(state, model, power, j, config.psi_steps, config.psi_lr,
                             config.guard, config.max_halvings, floor)
            rejected += rep.rejected + rep.non_finite
            update_g(state, model, power, j, config.guard, floor)
            V[j] = _variance_of(state, model, j, n_frames, floor)
        entry = _log_entry(it, state, X, V, {"psi_rejected": rejected, "skipped_updates": skipped})
        if not np.isfinite(entry["loglik"]):
            raise NonFiniteError(f"log-likelihood became non-finite at iteration {it}")
        log.append(entry)
    return MvaeResult(apply_demixing(state.W, X), state, log)

