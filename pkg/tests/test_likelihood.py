import io
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from greenmsm.errors import ImpossibleTransitionError, InputError, ModelError, NumericalError
from greenmsm.likelihood import (
    LikelihoodEvaluator,
    PanelDataset,
    PanelObservation,
    interval_log_likelihood,
    numerical_gradient,
    total_log_likelihood,
)
from greenmsm.model import ModelSpec, ParameterSet
from greenmsm.simulate import grouped_trajectories, sample_panel

from conftest import two_state_spec, two_state_theta

GH3_BASELINES = {"1->2": 0.005, "2->1": 0.021, "2->3": 0.022, "3->2": 1e-12}


def ladder_no_covariates():
    return ModelSpec.build(["low", "medium", "high"], ["1->2", "2->1", "2->3", "3->2"])


def brute_force_loglik(data, theta, spec):
    """Independent re-summation: scipy expm per interval, plain loops."""
    total = 0.0
    idx = {p: i for i, p in enumerate(spec.transitions.allowed)}
    for sid in data.subject_ids:
        times, states, covs = data[sid]
        for k in range(len(times) - 1):
            Q = np.zeros((spec.K, spec.K))
            for (r, s), i in idx.items():
                Q[r - 1, s - 1] = math.exp(theta.log_baseline[i] + float(np.dot(theta.beta[i], covs[k])))
            for r in range(spec.K):
                Q[r, r] = -Q[r].sum()
            P = scipy.linalg.expm((times[k + 1] - times[k]) * Q)
            total += math.log(P[states[k] - 1, states[k + 1] - 1])
    return total


@pytest.fixture(scope="module")
def small_panel():
    spec = ModelSpec.build(["low", "medium", "high"], ["1->2", "2->1", "2->3", "3->2"], ["x1", "x2"])
    theta = ParameterSet.from_intensities(
        spec, {"1->2": 0.08, "2->1": 0.06, "2->3": 0.07, "3->2": 0.05}, {"1->2": {"x1": 0.5}, "2->3": {"x2": -0.4}}
    )
    trajs = grouped_trajectories(12, 3, 30, spec.covariate_names, seed=4)
    return spec, theta, sample_panel(theta, spec, trajs, np.arange(30.0), seed=4)


# -- oracles -----------------------------------------------------------------------

def test_two_state_interval():
    spec = two_state_spec()
    theta = two_state_theta(spec)
    a = PanelObservation("s", 0.0, 1)
    b = PanelObservation("s", 2.0, 1)
    assert interval_log_likelihood(a, b, theta, spec) == pytest.approx(-0.5662191695169727, abs=1e-12)


def test_near_identity_limit():
    spec = two_state_spec()
    theta = ParameterSet(np.full(2, -30.0), np.zeros((2, 0)))
    a, b = PanelObservation("s", 0.0, 2), PanelObservation("s", 1.0, 2)
    assert -1e-12 < interval_log_likelihood(a, b, theta, spec) <= 0.0


def test_gh3_two_to_three_over_thirty_days():
    spec = ladder_no_covariates()
    theta = ParameterSet.from_intensities(spec, GH3_BASELINES)
    a, b = PanelObservation("s", 0.0, 2), PanelObservation("s", 30.0, 3)
    assert interval_log_likelihood(a, b, theta, spec) == pytest.approx(-0.9774527720192911, abs=1e-9)
    assert interval_log_likelihood(a, b, theta, spec) == pytest.approx(math.log(0.376), abs=2e-3)


def test_single_observations_score_zero():
    spec = two_state_spec()
    data = PanelDataset({"a": ([0.0], [1], np.zeros((1, 0))), "b": ([3.0], [2], np.zeros((1, 0)))}, [])
    assert total_log_likelihood(data, two_state_theta(spec), spec) == 0.0


def test_three_daily_stays():
    spec = two_state_spec()
    data = PanelDataset({"s": ([0.0, 1.0, 2.0], [1, 1, 1], np.zeros((3, 0)))}, [])
    assert total_log_likelihood(data, two_state_theta(spec), spec) == pytest.approx(-0.759770986083445, abs=1e-12)


def test_matches_independent_summation(small_panel):
    spec, theta, data = small_panel
    ll = total_log_likelihood(data, theta, spec)
    assert ll == pytest.approx(brute_force_loglik(data, theta, spec), abs=1e-10)


def test_left_endpoint_covariates_are_used():
    spec = two_state_spec(["x"])
    theta = ParameterSet(np.log([0.2, 0.3]), np.array([[1.0], [0.0]]))
    data = PanelDataset({"s": ([0.0, 1.0], [1, 2], [[0.5], [-4.0]])}, ["x"])
    Q = np.array([[-0.2 * math.exp(0.5), 0.2 * math.exp(0.5)], [0.3, -0.3]])
    expected = math.log(scipy.linalg.expm(Q)[0, 1])
    assert total_log_likelihood(data, theta, spec) == pytest.approx(expected, abs=1e-13)


# -- errors ------------------------------------------------------------------------

def test_impossible_interval_named():
    spec = ladder_no_covariates()
    theta = ParameterSet.from_intensities(spec, {"1->2": 0.1, "2->1": 0.1, "2->3": 0.1, "3->2": 0.1})
    with pytest.warns(UserWarning, match="strongly connected"):
        no_return = ModelSpec.build(["low", "medium", "high"], ["1->2", "2->3"])
    data = PanelDataset(
        {"ok": ([0, 1], [1, 2], np.zeros((2, 0))), "bad": ([0, 5, 7], [1, 3, 1], np.zeros((3, 0)))}, []
    )
    theta_nr = ParameterSet.from_intensities(no_return, {"1->2": 0.1, "2->3": 0.1})
    with pytest.raises(ImpossibleTransitionError) as err:
        total_log_likelihood(data, theta_nr, no_return)
    e = err.value
    assert (e.subject_id, e.t0, e.t1, e.from_state, e.to_state) == ("bad", 5.0, 7.0, 3, 1)
    assert total_log_likelihood(data, theta_nr, no_return, on_impossible="inf") == -math.inf
    assert math.isfinite(total_log_likelihood(data, theta, spec))


def test_state_outside_space_rejected():
    spec = two_state_spec()
    data = PanelDataset({"s": ([0, 1], [1, 3], np.zeros((2, 0)))}, [])
    with pytest.raises(InputError, match="outside"):
        total_log_likelihood(data, two_state_theta(spec), spec)


def test_covariate_mismatch_rejected():
    spec = two_state_spec(["x"])
    data = PanelDataset({"s": ([0, 1], [1, 2], np.zeros((2, 1)))}, ["y"])
    with pytest.raises(ModelError, match="do not match"):
        LikelihoodEvaluator(data, spec)


def test_repeated_times_rejected():
    with pytest.raises(InputError, match="repeated"):
        PanelDataset({"s": ([0, 1, 1], [1, 2, 2], np.zeros((3, 0)))}, [])


def test_interval_must_move_forward():
    spec = two_state_spec()
    with pytest.raises(InputError):
        interval_log_likelihood(PanelObservation("s", 2.0, 1), PanelObservation("s", 1.0, 1), two_state_theta(spec), spec)


# -- CSV --------------------------------------------------------------------------

def test_csv_round_trip_is_exact(small_panel):
    _, _, data = small_panel
    buf = io.StringIO()
    data.write_csv(buf)
    buf.seek(0)
    again = PanelDataset.read_csv(buf)
    assert again.subject_ids == data.subject_ids
    for sid in data.subject_ids:
        for a, b in zip(data[sid], again[sid]):
            np.testing.assert_array_equal(a, b)


def test_csv_header_checked():
    with pytest.raises(InputError, match="header"):
        PanelDataset.read_csv(io.StringIO("id,time,state\n1,0,1\n"))


def test_csv_bad_row_reports_line():
    with pytest.raises(InputError, match="line 3"):
        PanelDataset.read_csv(io.StringIO("subject_id,time,state\na,0,1\na,x,1\n"))


# -- numerical gradient -------------------------------------------------------------

def test_gradient_of_sum_of_squares():
    g = numerical_gradient(lambda x: float(np.sum(x**2)), [1.0, -2.0])
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)


def test_gradient_of_constant():
    np.testing.assert_allclose(numerical_gradient(lambda x: 3.0, [0.3, 40.0, -7.0]), 0.0, atol=1e-9)


def test_gradient_shrinks_step_near_pole():
    f = lambda x: -math.log(x[0] - 1.0 + 5e-7) if x[0] - 1.0 + 5e-7 > 0 else math.inf
    g = numerical_gradient(f, [1.0])
    assert g[0] == pytest.approx(-1 / 5e-7, rel=0.05)


def test_gradient_gives_up_with_coordinate():
    f = lambda x: math.inf if x[1] != 0.5 else 0.0
    with pytest.raises(NumericalError, match="coordinate 1"):
        numerical_gradient(f, [0.0, 0.5])


def test_gradient_richardson_consistency(small_panel):
    spec, theta, data = small_panel
    ev = LikelihoodEvaluator(data, spec)
    f = lambda v: ev(ParameterSet.from_vector(spec, v))
    x = theta.to_vector()

    def central(h):
        g = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h
            g[j] = (f(x + e) - f(x - e)) / (2 * h)
        return g

    exact = 4 * central(5e-3) / 3 - central(1e-2) / 3
    err_h = np.abs(central(1e-2) - exact).max()
    err_h2 = np.abs(central(5e-3) - exact).max()
    assert 3.0 < err_h / err_h2 < 5.0
    np.testing.assert_allclose(numerical_gradient(f, x), exact, atol=1e-5 * max(1, np.abs(exact).max()))


# -- properties ----------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(12))))
def test_subject_order_is_irrelevant(small_panel, perm):
    spec, theta, data = small_panel
    ids = data.subject_ids
    shuffled = PanelDataset({ids[i]: data[ids[i]] for i in perm}, data.covariate_names)
    assert total_log_likelihood(shuffled, theta, spec) == total_log_likelihood(data, theta, spec)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.01, 2.0), st.floats(0.01, 2.0), st.floats(0.05, 10.0), st.floats(0.05, 10.0),
    st.integers(1, 3), st.integers(1, 3), st.floats(-1.5, 1.5),
)
def test_chapman_kolmogorov_marginalization(q12, q23, s, t, a, b, z):
    """Summing the likelihood over the state of an inserted observation recovers the original."""
    spec = ModelSpec.build(["low", "medium", "high"], ["1->2", "2->1", "2->3", "3->2"], ["x"])
    theta = ParameterSet(np.log([q12, 0.3, q23, 0.2]), np.array([[0.4], [-0.2], [0.1], [0.6]]))
    base = PanelDataset({"s": ([0.0, s + t], [a, b], [[z], [z]])}, ["x"])
    direct = total_log_likelihood(base, theta, spec)
    parts = []
    for m in (1, 2, 3):
        split = PanelDataset({"s": ([0.0, s, s + t], [a, m, b], [[z], [z], [z]])}, ["x"])
        parts.append(total_log_likelihood(split, theta, spec, on_impossible="inf"))
    assert math.log(sum(math.exp(p) for p in parts)) == pytest.approx(direct, abs=1e-9)


def test_short_stays_approach_zero_from_below():
    spec = two_state_spec()
    theta = two_state_theta(spec)
    values = []
    for dt in (1.0, 0.1, 0.01, 0.001):
        data = PanelDataset({"s": ([0.0, dt], [1, 1], np.zeros((2, 0)))}, [])
        values.append(total_log_likelihood(data, theta, spec))
    assert all(v < 0 for v in values)
    assert values == sorted(values)
    assert values[-1] > -1e-3
