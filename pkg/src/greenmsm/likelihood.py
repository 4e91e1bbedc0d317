"""Panel-data likelihood for a covariate-dependent Markov chain.

Each subject contributes ``log P(dt; Q(z_left))[x_left, x_right]`` for every
pair of consecutive observations, with covariates held at the interval's
left endpoint.  Subjects are summed in sorted ``subject_id`` order so the
result does not depend on how the dataset was assembled.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ImpossibleTransitionError, InputError, ModelError, NumericalError
from .matexp import transition_probability_batch, transition_probability_matrix
from .model import ModelSpec, ParameterSet, assemble_generator, covariate_array, generator_from_rates

PANEL_COLUMNS = ("subject_id", "time", "state")


@dataclass(frozen=True)
class PanelObservation:
    subject_id: str
    time: float
    state: int
    covariates: object = None


class PanelDataset:
    """Per-subject, time-ordered observations sharing one covariate layout.

    Parameters
    ----------
    subjects : mapping subject_id -> (times, states, covariates)
        ``covariates`` has shape ``(n_obs, p)``.  Subject order is kept as
        given for I/O; likelihood sums always use sorted ids.
    covariate_names : sequence of str
    """

    def __init__(self, subjects: Mapping, covariate_names: Sequence[str]):
        self.covariate_names = tuple(covariate_names)
        p = len(self.covariate_names)
        self._subjects: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for sid, (times, states, covs) in subjects.items():
            sid = str(sid)
            times = np.asarray(times, dtype=float).reshape(-1)
            states = np.asarray(states, dtype=int).reshape(-1)
            covs = np.asarray(covs, dtype=float).reshape(times.size, p)
            if times.size == 0:
                raise InputError(f"subject {sid!r} has no observations")
            if states.size != times.size:
                raise InputError(f"subject {sid!r}: {states.size} states for {times.size} times")
            if not np.all(np.isfinite(times)):
                raise InputError(f"subject {sid!r} has non-finite observation times")
            if not np.all(np.isfinite(covs)):
                raise InputError(f"subject {sid!r} has non-finite covariate values")
            order = np.argsort(times, kind="stable")
            times, states, covs = times[order], states[order], covs[order]
            if np.any(np.diff(times) <= 0):
                raise InputError(f"subject {sid!r} has repeated observation times")
            for a in (times, states, covs):
                a.setflags(write=False)
            self._subjects[sid] = (times, states, covs)

    @classmethod
    def from_observations(cls, observations: Iterable[PanelObservation], covariate_names: Sequence[str]):
        grouped: dict[str, list] = {}
        for ob in observations:
            grouped.setdefault(str(ob.subject_id), []).append(
                (ob.time, ob.state, covariate_array(ob.covariates, covariate_names))
            )
        subjects = {
            sid: ([r[0] for r in rows], [r[1] for r in rows], np.array([r[2] for r in rows]).reshape(len(rows), -1))
            for sid, rows in grouped.items()
        }
        return cls(subjects, covariate_names)

    @property
    def subject_ids(self) -> list[str]:
        return list(self._subjects)

    def __len__(self) -> int:
        return len(self._subjects)

    def __getitem__(self, sid):
        return self._subjects[str(sid)]

    def items(self):
        return self._subjects.items()

    @property
    def n_observations(self) -> int:
        return sum(t.size for t, _, _ in self._subjects.values())

    def observations(self, sid) -> list[PanelObservation]:
        times, states, covs = self._subjects[str(sid)]
        return [
            PanelObservation(str(sid), float(t), int(s), dict(zip(self.covariate_names, map(float, z))))
            for t, s, z in zip(times, states, covs)
        ]

    def validate(self, spec: ModelSpec) -> None:
        if tuple(spec.covariate_names) != self.covariate_names:
            raise ModelError(
                f"dataset covariates {list(self.covariate_names)} do not match "
                f"model covariates {list(spec.covariate_names)}"
            )
        for sid, (_, states, _) in self._subjects.items():
            if states.min() < 1 or states.max() > spec.K:
                raise InputError(f"subject {sid!r} has states outside 1..{spec.K}")

    def state_counts(self, K: int) -> np.ndarray:
        counts = np.zeros(K, dtype=int)
        for _, states, _ in self._subjects.values():
            counts += np.bincount(states - 1, minlength=K)[:K]
        return counts

    def with_covariates(self, names: Sequence[str]) -> "PanelDataset":
        """Subset/reorder covariate columns by name."""
        idx = [self.covariate_names.index(n) for n in names]
        return PanelDataset({sid: (t, s, z[:, idx]) for sid, (t, s, z) in self._subjects.items()}, names)

    # -- CSV ---------------------------------------------------------------
    @classmethod
    def read_csv(cls, source) -> "PanelDataset":
        """Read long format: ``subject_id,time,state,<covariates...>``."""
        if hasattr(source, "read"):
            text = source.read()
        else:
            with open(source, newline="") as fh:
                text = fh.read()
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise InputError("panel CSV is empty") from None
        header = [h.strip() for h in header]
        if tuple(header[:3]) != PANEL_COLUMNS:
            raise InputError(f"panel CSV header must start with {','.join(PANEL_COLUMNS)}, got {header[:3]}")
        names = header[3:]
        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"panel CSV line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = float(row[1])
                s = int(row[2])
                z = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise InputError(f"panel CSV line {lineno}: {exc}") from None
            rows.setdefault(row[0], []).append((t, s, z))
        subjects = {
            sid: ([r[0] for r in rs], [r[1] for r in rs], np.array([r[2] for r in rs], dtype=float).reshape(len(rs), len(names)))
            for sid, rs in rows.items()
        }
        return cls(subjects, names)

    def write_csv(self, dest, float_format: Callable[[float], str] | None = None) -> None:
        fmt = float_format or format_float
        fh = open(dest, "w", newline="") if not hasattr(dest, "write") else dest
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(PANEL_COLUMNS) + list(self.covariate_names))
            for sid, (times, states, covs) in self._subjects.items():
                for t, s, z in zip(times, states, covs):
                    w.writerow([sid, fmt(t), int(s)] + [fmt(v) for v in z])
        finally:
            if fh is not dest:
                fh.close()


def format_float(x: float) -> str:
    """Shortest round-trip text; integral values drop the trailing ``.0``."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def format_sig6(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{float(x):.6g}"


class LikelihoodEvaluator:
    """Pre-indexed panel for repeated log-likelihood evaluation.

    Intervals sharing the exact same ``(dt, z)`` reuse a single transition
    matrix within one evaluation.
    """

    def __init__(self, data: PanelDataset, spec: ModelSpec):
        data.validate(spec)
        self.spec = spec
        sids, t0, t1, x0, x1, Z = [], [], [], [], [], []
        for sid in sorted(data.subject_ids):
            times, states, covs = data[sid]
            if times.size < 2:
                continue
            n = times.size - 1
            sids.extend([sid] * n)
            t0.append(times[:-1])
            t1.append(times[1:])
            x0.append(states[:-1] - 1)
            x1.append(states[1:] - 1)
            Z.append(covs[:-1])
        p = spec.n_covariates
        self.subject_of = sids
        self.t0 = np.concatenate(t0) if t0 else np.zeros(0)
        self.t1 = np.concatenate(t1) if t1 else np.zeros(0)
        self.from_idx = np.concatenate(x0) if x0 else np.zeros(0, dtype=int)
        self.to_idx = np.concatenate(x1) if x1 else np.zeros(0, dtype=int)
        Z = np.concatenate(Z) if Z else np.zeros((0, p))
        dt = self.t1 - self.t0
        keys = np.column_stack([dt, Z])
        if keys.shape[0]:
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        else:
            uniq, inverse = np.zeros((0, 1 + p)), np.zeros(0, dtype=int)
        self.unique_dt = uniq[:, 0]
        self.unique_z = uniq[:, 1:]
        self.inverse = np.asarray(inverse).reshape(-1)
        self.n_intervals = dt.size

    def interval_probabilities(self, theta: ParameterSet) -> np.ndarray:
        theta.check(self.spec)
        if self.n_intervals == 0:
            return np.zeros(0)
        with np.errstate(over="ignore"):
            rates = np.exp(theta.log_baseline + self.unique_z @ theta.beta.T)
        if not np.all(np.isfinite(rates)):
            raise NumericalError("transition intensity overflow")
        Q = generator_from_rates(rates, self.spec)
        P = transition_probability_batch(Q, self.unique_dt)
        return P[self.inverse, self.from_idx, self.to_idx]

    def contributions(self, theta: ParameterSet) -> np.ndarray:
        probs = self.interval_probabilities(theta)
        with np.errstate(divide="ignore"):
            return np.log(probs)

    def __call__(self, theta: ParameterSet, on_impossible: str = "raise") -> float:
        logp = self.contributions(theta)
        bad = np.flatnonzero(~np.isfinite(logp))
        if bad.size:
            i = int(bad[0])
            if on_impossible == "raise":
                raise ImpossibleTransitionError(
                    self.subject_of[i], float(self.t0[i]), float(self.t1[i]),
                    int(self.from_idx[i]) + 1, int(self.to_idx[i]) + 1,
                )
            return -math.inf
        return float(np.sum(logp))

    def first_impossible(self, theta: ParameterSet):
        """``(subject, t0, t1, from, to)`` of the first zero-probability interval, or None."""
        logp = self.contributions(theta)
        bad = np.flatnonzero(~np.isfinite(logp))
        if not bad.size:
            return None
        i = int(bad[0])
        return (self.subject_of[i], float(self.t0[i]), float(self.t1[i]), int(self.from_idx[i]) + 1, int(self.to_idx[i]) + 1)


def interval_log_likelihood(
    from_obs: PanelObservation, to_obs: PanelObservation, theta: ParameterSet, spec: ModelSpec
) -> float:
    """``log P(dt; Q(z_from))[from.state, to.state]``; ``-inf`` if impossible."""
    if str(from_obs.subject_id) != str(to_obs.subject_id):
        raise InputError("interval endpoints belong to different subjects")
    dt = float(to_obs.time) - float(from_obs.time)
    if not dt > 0:
        raise InputError(f"interval end {to_obs.time} is not after start {from_obs.time}")
    spec.states.check(from_obs.state)
    spec.states.check(to_obs.state)
    Q = assemble_generator(theta, from_obs.covariates, spec)
    p = transition_probability_matrix(Q, dt)[from_obs.state - 1, to_obs.state - 1]
    return math.log(p) if p > 0 else -math.inf


def total_log_likelihood(
    data: PanelDataset, theta: ParameterSet, spec: ModelSpec, on_impossible: str = "raise"
) -> float:
    """Sum of interval log-likelihoods over all subjects.

    With ``on_impossible="raise"`` a zero-probability interval raises
    :class:`ImpossibleTransitionError` naming the first offending interval;
    with ``"inf"`` the function returns ``-inf`` instead.
    """
    return LikelihoodEvaluator(data, spec)(theta, on_impossible=on_impossible)


def numerical_gradient(objective: Callable[[np.ndarray], float], x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``rel_step * max(1, |x_j|)``.

    A non-finite probe shrinks that coordinate's step tenfold once before
    giving up.
    """
    x = np.array(x, dtype=float).reshape(-1)
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        for attempt in range(2):
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            fp, fm = objective(xp), objective(xm)
            if math.isfinite(fp) and math.isfinite(fm):
                g[j] = (fp - fm) / (xp[j] - xm[j])
                break
            h /= 10.0
        else:
            raise NumericalError(f"objective is not finite around coordinate {j}")
    return g
