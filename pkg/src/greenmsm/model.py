"""State space, transition structure and generator assembly.

States are numbered ``1..K`` throughout the public API, matching the way
yield classes are labelled (1 = low, 2 = medium, 3 = high).  Intensities
follow a log-linear model

    q_rs(z) = exp(log_baseline_rs + beta_rs . z)

for every allowed pair ``(r, s)``; all other off-diagonal entries are
structural zeros and the diagonal is the negative row sum.
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ModelError

_TRANSITION_RE = re.compile(r"^\s*(\d+)\s*->\s*(\d+)\s*$")


def parse_transition(text: str) -> tuple[int, int]:
    """Parse ``"r->s"`` into a pair of 1-based state indices."""
    m = _TRANSITION_RE.match(str(text))
    if m is None:
        raise ModelError(f"malformed transition {text!r}; expected 'r->s'")
    r, s = int(m.group(1)), int(m.group(2))
    if r == s:
        raise ModelError(f"self-transition {text!r} is not allowed")
    return r, s


def transition_label(pair: tuple[int, int]) -> str:
    return f"{pair[0]}->{pair[1]}"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def covariate_array(z, names: Sequence[str]) -> np.ndarray:
    """Order a covariate mapping/sequence by ``names``; ``None`` means all zeros."""
    names = tuple(names)
    if isinstance(z, Mapping):
        missing = [n for n in names if n not in z]
        if missing:
            raise ModelError(f"covariate vector is missing {missing}")
        extra = [n for n in z if n not in names]
        if extra:
            raise ModelError(f"unknown covariates {extra}; model has {list(names)}")
        vec = np.array([float(z[n]) for n in names])
    elif z is None:
        vec = np.zeros(len(names))
    else:
        vec = np.asarray(z, dtype=float).reshape(-1)
        if vec.size != len(names):
            raise ModelError(f"covariate vector has {vec.size} entries, model expects {len(names)}")
    bad = [names[i] for i in np.flatnonzero(~np.isfinite(vec))]
    if bad:
        raise ModelError(f"non-finite covariate values for {bad}")
    return vec


@dataclass(frozen=True)
class StateSpace:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ModelError("a state space needs at least two states")
        if len(set(labels)) != len(labels):
            raise ModelError(f"state labels must be distinct, got {labels}")

    @property
    def K(self) -> int:
        return len(self.labels)

    def check(self, r: int) -> int:
        if not (isinstance(r, (int, np.integer)) and 1 <= r <= self.K):
            raise ModelError(f"state {r!r} outside 1..{self.K}")
        return int(r)


@dataclass(frozen=True)
class TransitionStructure:
    """Allowed ``(r, s)`` moves, stored sorted so parameter order is canonical."""

    allowed: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = []
        for p in self.allowed:
            if isinstance(p, str):
                p = parse_transition(p)
            r, s = int(p[0]), int(p[1])
            if r == s:
                raise ModelError(f"self-transition {r}->{s} is not allowed")
            pairs.append((r, s))
        if len(set(pairs)) != len(pairs):
            raise ModelError("duplicate transitions in structure")
        if not pairs:
            raise ModelError("at least one transition must be allowed")
        object.__setattr__(self, "allowed", tuple(sorted(pairs)))

    def __len__(self) -> int:
        return len(self.allowed)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.allowed

    @property
    def labels(self) -> list[str]:
        return [transition_label(p) for p in self.allowed]

    def reachability(self, K: int) -> np.ndarray:
        """Boolean ``K x K`` matrix; entry (i, j) true if j is reachable from i."""
        reach = np.eye(K, dtype=bool)
        for r, s in self.allowed:
            reach[r - 1, s - 1] = True
        for k in range(K):
            reach |= reach[:, [k]] & reach[[k], :]
        return reach

    def is_connected(self, K: int) -> bool:
        return bool(self.reachability(K).all())


@dataclass(frozen=True)
class ModelSpec:
    states: StateSpace
    transitions: TransitionStructure
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        names = tuple(str(c) for c in self.covariate_names)
        object.__setattr__(self, "covariate_names", names)
        if len(set(names)) != len(names):
            raise ModelError(f"covariate names must be distinct, got {names}")
        K = self.states.K
        for r, s in self.transitions.allowed:
            if not (1 <= r <= K and 1 <= s <= K):
                raise ModelError(f"transition {r}->{s} refers to a state outside 1..{K}")
        if not self.transitions.is_connected(K):
            warnings.warn(
                "transition structure is not strongly connected; some states "
                "cannot reach each other",
                stacklevel=3,
            )

    @classmethod
    def build(cls, labels: Sequence[str], transitions: Iterable, covariates: Sequence[str] = ()):
        return cls(StateSpace(tuple(labels)), TransitionStructure(tuple(transitions)), tuple(covariates))

    @property
    def K(self) -> int:
        return self.states.K

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_parameters(self) -> int:
        return self.n_transitions * (1 + self.n_covariates)

    def parameter_names(self) -> list[str]:
        names = []
        for lab in self.transitions.labels:
            names.append(f"q⁰({lab})")
            names.extend(f"beta({lab}, {c})" for c in self.covariate_names)
        return names

    def covariate_vector(self, z) -> np.ndarray:
        """Validate ``z`` (mapping or sequence) and return it in spec order."""
        return covariate_array(z, self.covariate_names)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "states": list(self.states.labels),
            "transitions": self.transitions.labels,
            "covariates": list(self.covariate_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        unknown = set(d) - {"states", "transitions", "covariates"}
        if unknown:
            raise ModelError(f"unknown model keys {sorted(unknown)}")
        for key in ("states", "transitions"):
            if key not in d:
                raise ModelError(f"model spec is missing {key!r}")
        return cls.build(d["states"], [parse_transition(t) for t in d["transitions"]], d.get("covariates") or ())

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        data = yaml.safe_load(text)
        if not isinstance(data, Mapping):
            raise ModelError("model spec text must be a mapping")
        return cls.from_dict(data)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Log baseline intensities and covariate coefficients, per allowed pair.

    ``log_baseline`` has shape ``(n_transitions,)`` and ``beta`` has shape
    ``(n_transitions, n_covariates)``, rows ordered like
    ``spec.transitions.allowed``.
    """

    log_baseline: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        lb = _frozen(np.asarray(self.log_baseline, dtype=float).reshape(-1))
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim == 1:
            beta = beta.reshape(lb.size, -1) if lb.size else beta.reshape(0, 0)
        object.__setattr__(self, "log_baseline", lb)
        object.__setattr__(self, "beta", _frozen(beta))
        if beta.shape[0] != lb.size:
            raise ModelError(f"beta has {beta.shape[0]} rows for {lb.size} transitions")

    @property
    def baseline(self) -> np.ndarray:
        return np.exp(self.log_baseline)

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[log q0, beta_1..beta_p]`` per transition."""
        return np.column_stack([self.log_baseline, self.beta]).reshape(-1)

    @classmethod
    def from_vector(cls, spec: ModelSpec, vec) -> "ParameterSet":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != spec.n_parameters:
            raise ModelError(f"parameter vector has {vec.size} entries, spec needs {spec.n_parameters}")
        block = vec.reshape(spec.n_transitions, 1 + spec.n_covariates)
        return cls(block[:, 0], block[:, 1:])

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterSet":
        return cls(np.zeros(spec.n_transitions), np.zeros((spec.n_transitions, spec.n_covariates)))

    @classmethod
    def from_intensities(
        cls,
        spec: ModelSpec,
        baselines: Mapping[str, float],
        coefficients: Mapping[str, Mapping[str, float]] | None = None,
    ) -> "ParameterSet":
        """Build from natural-scale baselines keyed by ``"r->s"``.

        >>> spec = ModelSpec.build(["a", "b"], ["1->2", "2->1"])
        >>> ParameterSet.from_intensities(spec, {"1->2": 1.0, "2->1": 2.0}).baseline
        array([1., 2.])
        """
        coefficients = coefficients or {}
        index = {p: i for i, p in enumerate(spec.transitions.allowed)}
        lb = np.full(spec.n_transitions, np.nan)
        beta = np.zeros((spec.n_transitions, spec.n_covariates))
        for key, q in baselines.items():
            pair = parse_transition(key)
            if pair not in index:
                raise ModelError(f"baseline given for disallowed transition {key}")
            if not q > 0:
                raise ModelError(f"baseline intensity for {key} must be positive, got {q}")
            lb[index[pair]] = math.log(q)
        missing = [transition_label(p) for p, i in index.items() if np.isnan(lb[i])]
        if missing:
            raise ModelError(f"no baseline given for {missing}")
        cov_index = {c: j for j, c in enumerate(spec.covariate_names)}
        for key, row in coefficients.items():
            pair = parse_transition(key)
            if pair not in index:
                raise ModelError(f"coefficients given for disallowed transition {key}")
            for c, b in row.items():
                if c not in cov_index:
                    raise ModelError(f"unknown covariate {c!r} in coefficients for {key}")
                beta[index[pair], cov_index[c]] = float(b)
        return cls(lb, beta)

    def check(self, spec: ModelSpec) -> None:
        if self.log_baseline.size != spec.n_transitions or self.beta.shape != (
            spec.n_transitions,
            spec.n_covariates,
        ):
            raise ModelError(
                f"parameter shape {self.beta.shape} does not match spec "
                f"({spec.n_transitions}, {spec.n_covariates})"
            )
        names = spec.parameter_names()
        bad = np.flatnonzero(~np.isfinite(self.to_vector()))
        if bad.size:
            raise ModelError(f"non-finite parameter {names[bad[0]]}")


def intensities(theta: ParameterSet, z: np.ndarray) -> np.ndarray:
    """Off-diagonal intensities for each allowed pair; ``z`` may be batched ``(n, p)``."""
    return np.exp(theta.log_baseline + z @ theta.beta.T)


def generator_from_rates(rates: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Place per-transition rates (``(..., n_trans)``) into ``(..., K, K)`` generators."""
    rates = np.asarray(rates, dtype=float)
    K = spec.K
    Q = np.zeros(rates.shape[:-1] + (K, K))
    for i, (r, s) in enumerate(spec.transitions.allowed):
        Q[..., r - 1, s - 1] = rates[..., i]
    idx = np.arange(K)
    Q[..., idx, idx] = -Q.sum(axis=-1)
    return Q


def assemble_generator(theta: ParameterSet, z, spec: ModelSpec) -> np.ndarray:
    """Generator matrix ``Q(z)`` (units day^-1), returned read-only.

    >>> spec = ModelSpec.build(["lo", "hi"], ["1->2", "2->1"])
    >>> theta = ParameterSet.from_intensities(spec, {"1->2": 0.5, "2->1": 0.25})
    >>> assemble_generator(theta, None, spec)
    array([[-0.5 ,  0.5 ],
           [ 0.25, -0.25]])
    """
    theta.check(spec)
    zvec = spec.covariate_vector(z)
    rates = intensities(theta, zvec)
    if not np.all(np.isfinite(rates)):
        i = int(np.flatnonzero(~np.isfinite(rates))[0])
        raise ModelError(f"intensity for {spec.transitions.labels[i]} overflowed")
    return _frozen(generator_from_rates(rates, spec))


def _exit_rate(Q: np.ndarray, r: int) -> float:
    Q = np.asarray(Q)
    if not 1 <= r <= Q.shape[0]:
        raise ModelError(f"state {r} outside 1..{Q.shape[0]}")
    return -float(Q[r - 1, r - 1])


def sojourn_time(Q, r: int) -> float:
    """Expected residence time in state ``r`` (days); ``inf`` when absorbing."""
    rate = _exit_rate(Q, r)
    if rate <= 0.0:
        return math.inf
    return 1.0 / rate


def next_state_distribution(Q, r: int) -> np.ndarray:
    """Jump probabilities out of state ``r``, as a length-K vector (entry r is 0)."""
    rate = _exit_rate(Q, r)
    if rate <= 0.0:
        raise ModelError(f"state {r} is absorbing; its jump distribution is undefined")
    row = np.array(Q[r - 1], dtype=float)
    row[r - 1] = 0.0
    return row / rate
