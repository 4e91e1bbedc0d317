"""Hazard ratios, horizon forecasts, sojourn summaries and what-if scenarios."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelError
from .matexp import transition_probability_matrix
from .model import ModelSpec, assemble_generator, sojourn_time
from .optim import FitResult

Z95 = 1.96


@dataclass(frozen=True)
class HazardRatioEntry:
    transition: tuple[int, int]
    covariate: str
    hr: float
    ci_low: float | None
    ci_high: float | None
    unstable: bool

    @property
    def label(self) -> str:
        return f"{self.transition[0]}->{self.transition[1]}"


@dataclass(frozen=True, eq=False)
class HorizonForecast:
    horizon: float
    matrix: np.ndarray
    covariates: dict


@dataclass(frozen=True, eq=False)
class ScenarioComparison:
    horizon: float
    base: HorizonForecast
    alt: HorizonForecast
    delta: np.ndarray  # P_alt - P_base
    sojourn_base: np.ndarray
    sojourn_alt: np.ndarray
    sojourn_ratio: np.ndarray


def _check_spec(fit: FitResult, spec: ModelSpec) -> None:
    if spec.to_dict() != fit.spec.to_dict():
        raise ModelError("fit result was produced under a different model spec")


def hazard_ratios(fit: FitResult, spec: ModelSpec | None = None) -> list[HazardRatioEntry]:
    """``exp(beta)`` with log-scale Wald 95% intervals, by transition then covariate.

    Entries are unstable when the fit did not converge, the transition sits
    at the boundary, or no covariance is available (then CIs are ``None``).
    """
    spec = spec or fit.spec
    _check_spec(fit, spec)
    se = fit.standard_errors
    p1 = 1 + spec.n_covariates
    out = []
    for i, pair in enumerate(spec.transitions.allowed):
        boundary = bool(fit.boundary_flags.get(f"{pair[0]}->{pair[1]}", False))
        for j, cov in enumerate(spec.covariate_names):
            b = float(fit.theta_hat.beta[i, j])
            hr = math.exp(b)
            lo = hi = None
            if se is not None:
                half = Z95 * float(se[i * p1 + 1 + j])
                lo, hi = math.exp(b - half), math.exp(b + half)
            out.append(HazardRatioEntry(pair, cov, hr, lo, hi, boundary or se is None or not fit.converged))
    return out


def predict_matrix(fit: FitResult, spec: ModelSpec | None, z, t: float) -> HorizonForecast:
    """Transition probabilities over ``t`` days with covariates fixed at ``z``."""
    spec = spec or fit.spec
    _check_spec(fit, spec)
    zvec = spec.covariate_vector(z)
    Q = assemble_generator(fit.theta_hat, zvec, spec)
    P = transition_probability_matrix(Q, t)
    return HorizonForecast(float(t), P, dict(zip(spec.covariate_names, map(float, zvec))))


def intensity_matrix(fit: FitResult, spec: ModelSpec | None = None, z=None) -> np.ndarray:
    spec = spec or fit.spec
    _check_spec(fit, spec)
    return np.asarray(assemble_generator(fit.theta_hat, z, spec))


def sojourn_times(fit: FitResult, spec: ModelSpec | None = None, z=None) -> np.ndarray:
    spec = spec or fit.spec
    _check_spec(fit, spec)
    Q = assemble_generator(fit.theta_hat, z, spec)
    return np.array([sojourn_time(Q, r) for r in range(1, spec.K + 1)])


def sojourn_summary(fit: FitResult, spec: ModelSpec | None = None) -> list[dict]:
    """Mean sojourn per state at z = 0 with delta-method 95% CIs.

    Only the log-baseline block of the covariance enters the interval.
    ``log T_r = -log sum_s exp(a_rs)`` so its gradient is ``-softmax(a_r.)``.
    """
    spec = spec or fit.spec
    _check_spec(fit, spec)
    p1 = 1 + spec.n_covariates
    lb = fit.theta_hat.log_baseline
    rows = []
    for r in range(1, spec.K + 1):
        idx = [i for i, (a, _) in enumerate(spec.transitions.allowed) if a == r]
        if not idx:
            rows.append({"state": r, "sojourn": math.inf, "ci_low": None, "ci_high": None})
            continue
        a = lb[idx]
        log_T = -float(np.logaddexp.reduce(a))
        T = math.exp(log_T)
        lo = hi = None
        if fit.covariance is not None:
            w = np.exp(a + log_T)
            cols = [i * p1 for i in idx]
            var = float(w @ fit.covariance[np.ix_(cols, cols)] @ w)
            half = Z95 * math.sqrt(max(var, 0.0))
            lo, hi = math.exp(log_T - half), math.exp(log_T + half)
        rows.append({"state": r, "sojourn": T, "ci_low": lo, "ci_high": hi})
    return rows


def scenario_compare(fit: FitResult, spec: ModelSpec | None, z_base, z_alt, t: float) -> ScenarioComparison:
    """Entrywise change in ``P(t)`` and per-state sojourn ratios (alt / base)."""
    spec = spec or fit.spec
    base = predict_matrix(fit, spec, z_base, t)
    alt = predict_matrix(fit, spec, z_alt, t)
    s_base = sojourn_times(fit, spec, z_base)
    s_alt = sojourn_times(fit, spec, z_alt)
    with np.errstate(invalid="ignore"):
        ratio = np.where(s_base == s_alt, 1.0, s_alt / s_base)
    return ScenarioComparison(float(t), base, alt, alt.matrix - base.matrix, s_base, s_alt, ratio)
