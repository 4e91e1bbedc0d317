"""Maximum-likelihood fitting: BFGS, Nelder-Mead, and observed information."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError, ModelError, NumericalError
from .likelihood import LikelihoodEvaluator, PanelDataset, numerical_gradient
from .model import ModelSpec, ParameterSet, transition_label

log = logging.getLogger(__name__)

ALGORITHMS = ("bfgs", "nelder_mead")

BASELINE_FLOOR = 1e-3
BOUNDARY_BASELINE = 1e-6
BOUNDARY_BETA = 10.0

ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 60

NM_REFLECT, NM_EXPAND, NM_CONTRACT, NM_SHRINK = 1.0, 2.0, 0.5, 0.5
NM_INITIAL_STEP = 0.1

HESSIAN_REL_STEP = 1e-3


@dataclass(frozen=True)
class FitOptions:
    algorithm: str = "bfgs"
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    function_tolerance: float = 1e-9
    simplex_tolerance: float = 1e-8
    max_evaluations: int = 5000
    compute_hessian: bool = True

    def __post_init__(self):
        algo = self.algorithm.replace("-", "_").lower()
        if algo not in ALGORITHMS:
            raise InputError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        object.__setattr__(self, "algorithm", algo)
        for name in ("gradient_tolerance", "function_tolerance", "simplex_tolerance"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.max_iterations < 1 or self.max_evaluations < 1:
            raise InputError("iteration and evaluation caps must be at least 1")


@dataclass(frozen=True)
class ObservedInformation:
    hessian: np.ndarray
    eigenvalues: np.ndarray
    condition_number: float | None
    covariance: np.ndarray | None

    @property
    def positive_definite(self) -> bool:
        return self.covariance is not None


@dataclass(eq=False)
class FitResult:
    spec: ModelSpec
    theta_hat: ParameterSet
    log_likelihood: float
    n_parameters: int
    algorithm: str = "bfgs"
    converged: bool = True
    iterations: int = 0
    n_evaluations: int = 0
    message: str = ""
    covariance: np.ndarray | None = None
    hessian: np.ndarray | None = None
    hessian_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    condition_number: float | None = None
    boundary_flags: dict = field(default_factory=dict)
    aic: float = field(init=False)

    def __post_init__(self):
        self.aic = 2 * self.n_parameters - 2 * self.log_likelihood

    @property
    def identified(self) -> bool:
        return self.covariance is not None

    @property
    def standard_errors(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.diag(self.covariance))

    def to_dict(self) -> dict:
        spec = self.spec
        names = spec.parameter_names()
        vec = self.theta_hat.to_vector()
        se = self.standard_errors
        params = []
        for j, name in enumerate(names):
            entry = {"name": name, "coordinate": float(vec[j])}
            if name.startswith("q⁰"):
                entry["value"] = math.exp(vec[j])
                entry["scale"] = "log"
            else:
                entry["value"] = float(vec[j])
                entry["scale"] = "linear"
            entry["se"] = None if se is None else float(se[j])
            params.append(entry)
        return {
            "model": spec.to_dict(),
            "algorithm": self.algorithm,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "n_evaluations": int(self.n_evaluations),
            "message": self.message,
            "log_likelihood": float(self.log_likelihood),
            "aic": float(self.aic),
            "n_parameters": int(self.n_parameters),
            "parameters": params,
            "hessian_eigenvalues": [float(v) for v in self.hessian_eigenvalues],
            "condition_number": None if self.condition_number is None else float(self.condition_number),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "hessian": None if self.hessian is None else self.hessian.tolist(),
            "boundary_flags": {k: bool(v) for k, v in self.boundary_flags.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        spec = ModelSpec.from_dict(d["model"])
        vec = np.array([p["coordinate"] for p in d["parameters"]], dtype=float)
        cov = d.get("covariance")
        hess = d.get("hessian")
        return cls(
            spec=spec,
            theta_hat=ParameterSet.from_vector(spec, vec),
            log_likelihood=float(d["log_likelihood"]),
            n_parameters=int(d["n_parameters"]),
            algorithm=d.get("algorithm", "bfgs"),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
            n_evaluations=int(d.get("n_evaluations", 0)),
            message=d.get("message", ""),
            covariance=None if cov is None else np.array(cov, dtype=float),
            hessian=None if hess is None else np.array(hess, dtype=float),
            hessian_eigenvalues=np.array(d.get("hessian_eigenvalues", []), dtype=float),
            condition_number=d.get("condition_number"),
            boundary_flags=dict(d.get("boundary_flags", {})),
        )


def crude_initializer(data: PanelDataset, spec: ModelSpec) -> ParameterSet:
    """Occurrence/exposure baselines from consecutive observations, betas zero.

    ``q0_rs = (# intervals r -> s) / (total interval time starting in r)``,
    floored at ``BASELINE_FLOOR``.
    """
    data.validate(spec)
    K = spec.K
    moves = np.zeros((K, K))
    exposure = np.zeros(K)
    for _, (times, states, _) in data.items():
        dt = np.diff(times)
        np.add.at(moves, (states[:-1] - 1, states[1:] - 1), 1.0)
        np.add.at(exposure, states[:-1] - 1, dt)
    lb = np.empty(spec.n_transitions)
    for i, (r, s) in enumerate(spec.transitions.allowed):
        if exposure[r - 1] <= 0:
            warnings.warn(f"state {r} is never occupied at an interval start; "
                          f"baseline {transition_label((r, s))} set to the floor", stacklevel=2)
            q = BASELINE_FLOOR
        else:
            q = max(moves[r - 1, s - 1] / exposure[r - 1], BASELINE_FLOOR)
        lb[i] = math.log(q)
    return ParameterSet(lb, np.zeros((spec.n_transitions, spec.n_covariates)))


class _Objective:
    """Negative log-likelihood over flat parameter vectors; failures map to +inf."""

    def __init__(self, evaluator: LikelihoodEvaluator):
        self.evaluator = evaluator
        self.spec = evaluator.spec
        self.n_evaluations = 0

    def __call__(self, x: np.ndarray) -> float:
        self.n_evaluations += 1
        if not np.all(np.isfinite(x)):
            return math.inf
        try:
            ll = self.evaluator(ParameterSet.from_vector(self.spec, x), on_impossible="inf")
        except (NumericalError, ModelError, FloatingPointError):
            return math.inf
        return -ll if math.isfinite(ll) else math.inf


def _bfgs(f: Callable, x0: np.ndarray, opts: FitOptions, callback: Callable | None = None):
    x = x0.copy()
    fx = f(x)
    g = numerical_gradient(f, x)
    n = x.size
    H = np.eye(n)
    fresh = True
    it = 0
    small_steps = 0
    converged = False
    message = "iteration cap reached"
    while it < opts.max_iterations:
        if np.max(np.abs(g)) < opts.gradient_tolerance:
            converged, message = True, "gradient tolerance met"
            break
        p = -H @ g
        slope = float(g @ p)
        if not slope < 0:
            H, fresh = np.eye(n), True
            p = -g
            slope = float(g @ p)
        alpha = 1.0
        for _ in range(MAX_BACKTRACKS):
            x_new = x + alpha * p
            f_new = f(x_new)
            if math.isfinite(f_new) and f_new <= fx + ARMIJO_C1 * alpha * slope:
                break
            alpha *= BACKTRACK
        else:
            if not fresh:
                H, fresh = np.eye(n), True
                continue
            message = "line search failed to find a sufficient decrease"
            break
        it += 1
        g_new = numerical_gradient(f, x_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        f_old = fx
        x, fx, g = x_new, f_new, g_new
        if callback is not None:
            callback(x, fx)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
            fresh = False
        # one tiny step can come from a poorly scaled direction; require two in a row
        small = abs(f_old - fx) <= opts.function_tolerance * max(abs(f_old), abs(fx), 1.0)
        small_steps = small_steps + 1 if small else 0
        if small_steps >= 2:
            converged = True
            message = "relative objective change below tolerance"
            if np.max(np.abs(g)) < opts.gradient_tolerance:
                message = "gradient tolerance met"
            break
    return x, fx, it, converged, message


def _nelder_mead(f: Callable, x0: np.ndarray, opts: FitOptions, callback: Callable | None = None):
    n = x0.size
    simplex = np.vstack([x0] + [x0 + NM_INITIAL_STEP * e for e in np.eye(n)])
    fs = np.array([f(v) for v in simplex])
    evals = n + 1
    it = 0
    converged = False
    message = "evaluation cap reached"
    while evals < opts.max_evaluations:
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        if math.isfinite(fs[-1]) and fs[-1] - fs[0] < opts.simplex_tolerance:
            converged, message = True, "simplex spread below tolerance"
            break
        it += 1
        if callback is not None:
            callback(simplex[0], fs[0])
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + NM_REFLECT * (centroid - worst)
        fr = f(xr)
        evals += 1
        if fr < fs[0]:
            xe = centroid + NM_EXPAND * (xr - centroid)
            fe = f(xe)
            evals += 1
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + NM_CONTRACT * (xr - centroid)
            fc = f(xc)
            evals += 1
            if fc <= fr:
                simplex[-1], fs[-1] = xc, fc
                continue
        else:
            xc = centroid + NM_CONTRACT * (worst - centroid)
            fc = f(xc)
            evals += 1
            if fc < fs[-1]:
                simplex[-1], fs[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + NM_SHRINK * (simplex[1:] - simplex[0])
        fs[1:] = [f(v) for v in simplex[1:]]
        evals += n
    best = int(np.argmin(fs))
    return simplex[best].copy(), float(fs[best]), it, converged, message


def finite_difference_hessian(objective: Callable[[np.ndarray], float], x) -> np.ndarray:
    """Central differences of the numerical gradient, symmetrized."""
    x = np.array(x, dtype=float).reshape(-1)
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        h = HESSIAN_REL_STEP * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = (numerical_gradient(objective, xp) - numerical_gradient(objective, xm)) / (xp[j] - xm[j])
    return (H + H.T) / 2.0


def summarize_information(H: np.ndarray) -> ObservedInformation:
    H = np.asarray(H, dtype=float)
    eig = np.sort(np.linalg.eigvalsh(H))
    if eig.size and eig[0] > 0:
        cov = np.linalg.inv(H)
        cov = (cov + cov.T) / 2.0
        return ObservedInformation(H, eig, float(eig[-1] / eig[0]), cov)
    return ObservedInformation(H, eig, None, None)


def observed_information(data: PanelDataset, spec: ModelSpec, theta_hat: ParameterSet) -> ObservedInformation:
    """Hessian of the negative log-likelihood at ``theta_hat`` and derived summaries.

    ``covariance`` and ``condition_number`` are ``None`` unless the Hessian is
    positive definite.
    """
    f = _Objective(LikelihoodEvaluator(data, spec))
    x = theta_hat.to_vector()
    if not math.isfinite(f(x)):
        raise NumericalError("log-likelihood is not finite at the supplied estimate")
    return summarize_information(finite_difference_hessian(f, x))


def boundary_flags(theta: ParameterSet, spec: ModelSpec) -> dict[str, bool]:
    flags = {}
    for i, lab in enumerate(spec.transitions.labels):
        flags[lab] = bool(
            theta.baseline[i] < BOUNDARY_BASELINE or np.any(np.abs(theta.beta[i]) > BOUNDARY_BETA)
        )
    return flags


def fit(
    data: PanelDataset,
    spec: ModelSpec,
    theta0: ParameterSet | None = None,
    opts: FitOptions | None = None,
) -> FitResult:
    """Maximize the panel log-likelihood starting from ``theta0``.

    ``theta0`` defaults to :func:`crude_initializer`.  The returned estimate
    never scores below the start.
    """
    opts = opts or FitOptions()
    evaluator = LikelihoodEvaluator(data, spec)
    if theta0 is None:
        theta0 = crude_initializer(data, spec)
    theta0.check(spec)
    bad = evaluator.first_impossible(theta0)
    if bad is not None:
        sid, t0, t1, a, b = bad
        raise NumericalError(
            f"log-likelihood is -inf at the starting values: subject {sid!r}, "
            f"{a}->{b} over [{t0:g}, {t1:g}]"
        )
    f = _Objective(evaluator)
    x0 = theta0.to_vector()
    if opts.algorithm == "bfgs":
        x, fx, it, converged, message = _bfgs(f, x0, opts)
    else:
        x, fx, it, converged, message = _nelder_mead(f, x0, opts)
    if not math.isfinite(fx):
        raise NumericalError("optimizer ended at a non-finite objective")
    theta_hat = ParameterSet.from_vector(spec, x)
    log.info("%s: logLik %.6f after %d iterations (%s)", opts.algorithm, -fx, it, message)
    result = FitResult(
        spec=spec,
        theta_hat=theta_hat,
        log_likelihood=-fx,
        n_parameters=spec.n_parameters,
        algorithm=opts.algorithm,
        converged=converged,
        iterations=it,
        n_evaluations=f.n_evaluations,
        message=message,
        boundary_flags=boundary_flags(theta_hat, spec),
    )
    if opts.compute_hessian:
        info = summarize_information(finite_difference_hessian(f, x))
        result.hessian = info.hessian
        result.hessian_eigenvalues = info.eigenvalues
        result.condition_number = info.condition_number
        result.covariance = info.covariance
        if not info.positive_definite:
            result.message += "; Hessian not positive definite (non-identified)"
    return result
