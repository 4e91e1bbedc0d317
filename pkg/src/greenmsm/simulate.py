"""Forward simulation of the covariate-driven chain.

Covariates are piecewise constant per day.  Inside a day the waiting time
is exponential at the current exit rate; a wait that crosses midnight is
discarded and redrawn from the boundary with the next day's rates, which is
exact because exponential waits are memoryless.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, NumericalError
from .likelihood import PanelDataset
from .model import ModelSpec, ParameterSet, generator_from_rates, intensities


@dataclass(frozen=True, eq=False)
class CovariateTrajectory:
    """Row ``d`` of ``values`` holds the covariates on ``[d, d + 1)``.

    Times past the last row keep the last row's covariates.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.shape[0] == 0:
            raise InputError("covariate trajectory needs at least one day")
        if not np.all(np.isfinite(v)):
            raise InputError("covariate trajectory has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, z, n_days: int = 1) -> "CovariateTrajectory":
        z = np.asarray(z, dtype=float).reshape(1, -1)
        return cls(np.repeat(z, n_days, axis=0))

    def at_day(self, day: int) -> np.ndarray:
        return self.values[min(max(int(day), 0), self.values.shape[0] - 1)]


@dataclass(frozen=True, eq=False)
class SimulatedPath:
    subject_id: str
    initial_state: int
    jump_times: np.ndarray
    states: np.ndarray  # state entered at each jump time

    def state_at(self, t: float) -> int:
        i = int(np.searchsorted(self.jump_times, t, side="right"))
        return int(self.states[i - 1]) if i else self.initial_state

    def sojourns(self) -> list[tuple[int, float]]:
        """Completed stays ``(state, duration)``; the censored final stay is dropped."""
        out = []
        prev_t, prev_s = 0.0, self.initial_state
        for t, s in zip(self.jump_times, self.states):
            out.append((prev_s, float(t - prev_t)))
            prev_t, prev_s = t, int(s)
        return out


def subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    """Per-subject stream: the subject index is mixed into the seed sequence."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(subject_index)]))


def _day_tables(theta, spec, traj):
    """Per-day exit rates ``(n_days, K)`` and cumulative jump probabilities ``(n_days, K, K)``."""
    theta.check(spec)
    if traj.values.shape[1] != spec.n_covariates:
        raise InputError(f"trajectory has {traj.values.shape[1]} covariates, model expects {spec.n_covariates}")
    Q = generator_from_rates(intensities(theta, traj.values), spec)
    if not np.all(np.isfinite(Q)):
        raise NumericalError("transition intensity overflow in simulation")
    K = spec.K
    exits = -Q[:, np.arange(K), np.arange(K)]
    safe = np.where(exits > 0, exits, 1.0)
    jump = Q / safe[:, :, None]
    jump[:, np.arange(K), np.arange(K)] = 0.0
    jump[exits <= 0] = 0.0
    return exits, np.cumsum(jump, axis=2)


def _run_path(tables, n_days, initial_state, horizon, rng, subject_id=""):
    exits_by_day, cum_by_day = tables
    times, states = [], []
    t = 0.0
    state = initial_state - 1
    day = 0
    last = n_days - 1
    while t < horizon:
        d = day if day < last else last
        day_end = min(float(day + 1), horizon)
        rate = exits_by_day[d, state]
        if rate > 0:
            w = rng.exponential(1.0 / rate)
            if t + w < day_end:
                t += w
                cum = cum_by_day[d, state]
                state = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                times.append(t)
                states.append(state + 1)
                continue
        t = day_end
        day += 1
    return SimulatedPath(
        str(subject_id), int(initial_state), np.array(times, dtype=float), np.array(states, dtype=int)
    )


def simulate_path(
    theta: ParameterSet,
    spec: ModelSpec,
    traj: CovariateTrajectory,
    initial_state: int,
    horizon: float,
    seed,
    subject_id: str = "",
) -> SimulatedPath:
    """Simulate one continuous-time path on ``[0, horizon)``.

    ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    spec.states.check(initial_state)
    if not horizon > 0:
        raise InputError(f"horizon must be positive, got {horizon}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tables = _day_tables(theta, spec, traj)
    return _run_path(tables, traj.values.shape[0], initial_state, float(horizon), rng, subject_id)


def sample_panel(
    theta: ParameterSet,
    spec: ModelSpec,
    trajs: Mapping[str, CovariateTrajectory],
    observation_times: Sequence[float],
    seed: int,
    initial_states: Mapping[str, int] | None = None,
) -> PanelDataset:
    """Simulate every subject and record its state at each observation time.

    Subject ``i`` (in mapping order) draws from ``subject_rng(seed, i)``.
    Missing initial states are drawn uniformly from ``1..K`` on that stream.
    Each record carries the covariates of the day containing its time.
    """
    obs = np.asarray(observation_times, dtype=float)
    if obs.size == 0 or obs[0] != 0 or np.any(np.diff(obs) <= 0):
        raise InputError("observation times must be strictly increasing and start at 0")
    horizon = float(obs[-1]) + 1.0
    subjects = {}
    tables: dict[int, tuple] = {}
    for i, (sid, traj) in enumerate(trajs.items()):
        if id(traj) not in tables:
            tables[id(traj)] = _day_tables(theta, spec, traj)
        rng = subject_rng(seed, i)
        if initial_states is not None and sid in initial_states:
            x0 = int(initial_states[sid])
        else:
            x0 = int(rng.integers(1, spec.K + 1))
        spec.states.check(x0)
        path = _run_path(tables[id(traj)], traj.values.shape[0], x0, horizon, rng, sid)
        states = [path.state_at(t) for t in obs]
        covs = np.array([traj.at_day(int(np.floor(t))) for t in obs]).reshape(obs.size, spec.n_covariates)
        subjects[sid] = (obs, states, covs)
    return PanelDataset(subjects, spec.covariate_names)


def grouped_trajectories(
    n_subjects: int, n_groups: int, n_days: int, covariate_names: Sequence[str], seed: int, sd: float = 1.0
) -> dict[str, CovariateTrajectory]:
    """Standard-normal daily covariates shared by all subjects of a group.

    Mirrors a greenhouse layout: lines in one house see the same climate.
    Subject ids are ``G<g>/L<k>``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31 - 1]))
    p = len(covariate_names)
    climate = rng.normal(0.0, sd, size=(n_groups, n_days, p))
    per_group = -(-n_subjects // n_groups)
    out = {}
    for i in range(n_subjects):
        g, k = divmod(i, per_group)
        out[f"G{g + 1}/L{k + 1}"] = CovariateTrajectory(climate[g])
    return out
