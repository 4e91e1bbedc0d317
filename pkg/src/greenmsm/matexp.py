"""Transition probability matrices ``P(t) = exp(tQ)``.

The primary route is scaling and squaring around a diagonal [6/6] Padé
approximant.  The matrix is scaled so its 1-norm is at most 0.5, where the
Padé truncation error is far below double-precision round-off.  A
uniformization series is provided as an independent cross-check.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ModelError, NumericalError

PADE_ORDER = 6
SCALED_NORM = 0.5
CLAMP_TOL = 1e-12
MAX_UNIFORMIZED_RATE_TIME = 1e4


def _pade_coefficients(m: int) -> np.ndarray:
    c = np.empty(m + 1)
    for k in range(m + 1):
        c[k] = (
            math.factorial(2 * m - k) * math.factorial(m)
            / (math.factorial(2 * m) * math.factorial(k) * math.factorial(m - k))
        )
    return c


_PADE = _pade_coefficients(PADE_ORDER)


def expm_batch(A: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack ``(..., K, K)`` of real matrices.

    Each matrix gets its own scaling exponent; matrices sharing an exponent
    are processed together.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ModelError(f"expected square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ModelError("matrix exponential of a non-finite matrix")
    shape = A.shape
    K = shape[-1]
    flat = A.reshape(-1, K, K)
    norms = np.abs(flat).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        exps = np.where(norms > SCALED_NORM, np.ceil(np.log2(norms / SCALED_NORM)), 0).astype(int)
    out = np.empty_like(flat)
    eye = np.eye(K)
    for s in np.unique(exps):
        sel = exps == s
        X = flat[sel] / (2.0 ** s)
        X2 = X @ X
        # even and odd parts of the Padé numerator; denominator is V - U
        V = _PADE[0] * eye + X2 * _PADE[2]
        U = _PADE[1] * eye + X2 * _PADE[3]
        Xp = X2
        for k in range(4, PADE_ORDER + 1, 2):
            Xp = Xp @ X2
            V = V + _PADE[k] * Xp
            if k + 1 <= PADE_ORDER:
                U = U + _PADE[k + 1] * Xp
        U = X @ U
        with np.errstate(over="ignore", invalid="ignore"):
            F = np.linalg.solve(V - U, V + U)
            for _ in range(int(s)):
                F = F @ F
        out[sel] = F
    return out.reshape(shape)


def _clean_stochastic(P: np.ndarray, reach: np.ndarray | None = None) -> np.ndarray:
    if not np.all(np.isfinite(P)):
        raise NumericalError("matrix exponential overflowed; intensities are too large")
    if reach is not None:
        P = np.where(reach, P, 0.0)
    worst = P.min() if P.size else 0.0
    if worst < -CLAMP_TOL:
        raise NumericalError(f"transition matrix has entry {worst:.3g} < 0; generator is invalid")
    P = np.clip(P, 0.0, None)
    return P / P.sum(axis=-1, keepdims=True)


def check_generator(Q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim < 2 or Q.shape[-1] != Q.shape[-2]:
        raise ModelError(f"generator must be square, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ModelError("generator has non-finite entries")
    K = Q.shape[-1]
    off = Q * (1 - np.eye(K))
    if (off < 0).any():
        raise ModelError("generator has negative off-diagonal entries")
    scale = np.maximum(np.abs(Q).max(axis=(-2, -1), keepdims=True), 1.0)
    if (np.abs(Q.sum(axis=-1, keepdims=True)) > tol * scale).any():
        raise ModelError("generator rows do not sum to zero")
    return Q


def reachability(Q: np.ndarray) -> np.ndarray:
    """Transitive closure of the positive off-diagonal pattern of ``Q`` (batched)."""
    Q = np.asarray(Q)
    K = Q.shape[-1]
    reach = (Q > 0) | np.eye(K, dtype=bool)
    for k in range(K):
        reach = reach | (reach[..., :, [k]] & reach[..., [k], :])
    return reach


def transition_probability_matrix(Q, t: float) -> np.ndarray:
    """``P(t) = exp(tQ)`` with rows summing to one and exact structural zeros.

    >>> Q = np.array([[-0.5, 0.5], [0.5, -0.5]])
    >>> round(float(transition_probability_matrix(Q, 2.0)[0, 0]), 5)
    0.56767
    """
    t = float(t)
    if not t >= 0 or not math.isfinite(t):
        raise ModelError(f"horizon must be a finite t >= 0, got {t}")
    Q = check_generator(Q)
    if t == 0.0:
        return np.eye(Q.shape[-1]) + np.zeros_like(Q)
    return _clean_stochastic(expm_batch(t * Q), reachability(Q))


def transition_probability_batch(Q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized ``exp(t_i Q_i)`` for stacks ``Q (n, K, K)`` and ``t (n,)``.

    Skips the per-call generator validation; callers assemble ``Q`` themselves.
    """
    Q = np.asarray(Q, dtype=float)
    t = np.asarray(t, dtype=float)
    P = expm_batch(Q * t[:, None, None])
    return _clean_stochastic(P, reachability(Q))


def uniformization_oracle(Q, t: float, tol: float = 1e-12) -> np.ndarray:
    """Poisson-weighted power series of the uniformized jump matrix.

    With ``lam = max |q_rr|`` and ``R = I + Q / lam``,
    ``P(t) = sum_n Pois(n; lam t) R^n``.  The series is cut once the Poisson
    tail bound drops below ``tol``; each entry of ``R^n`` lies in [0, 1], so
    the entrywise truncation error is bounded by the tail mass.
    """
    t = float(t)
    if not 0 < tol <= 1e-6:
        raise ModelError(f"tol must lie in (0, 1e-6], got {tol}")
    if not t >= 0 or not math.isfinite(t):
        raise ModelError(f"horizon must be a finite t >= 0, got {t}")
    Q = check_generator(Q)
    K = Q.shape[0]
    lam = float(np.max(-np.diag(Q)))
    if lam == 0.0 or t == 0.0:
        return np.eye(K)
    mu = lam * t
    if mu > MAX_UNIFORMIZED_RATE_TIME:
        raise ModelError(f"t * max|q_rr| = {mu:g} exceeds the supported range {MAX_UNIFORMIZED_RATE_TIME:g}")
    R = np.eye(K) + Q / lam
    log_mu = math.log(mu)
    P = np.zeros((K, K))
    term = np.eye(K)
    n = 0
    while True:
        log_w = -mu + n * log_mu - math.lgamma(n + 1)
        P += math.exp(log_w) * term
        # tail after n: sum_{k>n} w_k <= w_{n+1} / (1 - mu / (n + 2)) once n + 2 > mu
        if n + 2 > mu:
            w_next = math.exp(log_w + log_mu - math.log(n + 1))
            if w_next / (1.0 - mu / (n + 2)) <= tol:
                break
        term = term @ R
        n += 1
    return P
