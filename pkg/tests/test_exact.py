import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from edgewhittle.errors import ContractViolation, ResourceBudgetError
from edgewhittle.exact import (
    best_threshold,
    closed_classes,
    exact_policy_cost,
    expected_cost,
    indifference_subsidy,
    parking_margin,
    passive_mass,
    policy_stationary,
    relaxed_value,
    stationary_dist,
    stationary_dist_linear,
    threshold_action_map,
    threshold_avg_cost,
    value_iteration,
)
from edgewhittle.model import ServiceParams, SystemConfig

E = math.e
UNIT = ServiceParams(5, 5, 60)  # rho = 1, tail far below 1e-12


# Frozen values below come from the Poisson series (q(l) = e^-1 / l! at R=0,
# sum_{j>=1} 1/(j+1)! = e - 2 at R=1) and are cross-checked against the
# balance-equation solve.

def test_stationary_unit_load_r0():
    q = stationary_dist(UNIT, 0).probs
    want = [1 / E, 1 / E, 1 / (2 * E)]
    np.testing.assert_allclose(q[:3], want, atol=1e-12)
    np.testing.assert_allclose(stationary_dist_linear(UNIT, 0)[:3], want, atol=1e-12)


def test_stationary_unit_load_r1():
    d = stationary_dist(UNIT, 1)
    assert d.probs[0] == 0.0
    assert d.probs[1] == pytest.approx(1 / (E - 1), abs=1e-12)
    assert d.probs[1] == pytest.approx(0.58198, abs=1e-5)
    assert d.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_expected_cost_and_passive_mass():
    assert expected_cost(UNIT, 0) == pytest.approx(0.2, abs=1e-12)
    assert expected_cost(UNIT, 1) == pytest.approx(E / (E - 1) / 5, abs=1e-12)
    assert expected_cost(UNIT, 1) == pytest.approx(0.31640, abs=1e-5)
    assert passive_mass(UNIT, 0) == pytest.approx(0.36788, abs=1e-5)
    assert passive_mass(UNIT, 1) == pytest.approx(0.58198, abs=1e-5)
    # always-active carries no passive mass and the same cost as R=0
    assert passive_mass(UNIT, -1) == 0.0
    assert expected_cost(UNIT, -1) == pytest.approx(expected_cost(UNIT, 0))


def test_linear_oracle_matches_on_queue_weights():
    for R in (0, 1, 4):
        pi = stationary_dist_linear(UNIT, R)
        assert np.dot(np.arange(61) / 5, pi) == pytest.approx(expected_cost(UNIT, R), abs=1e-12)


def test_threshold_avg_cost():
    assert threshold_avg_cost(UNIT, 0, 1.0) == pytest.approx(0.2 - 1 / E, abs=1e-12)
    assert threshold_avg_cost(UNIT, 0, 1.0) == pytest.approx(-0.16788, abs=1e-5)
    assert threshold_avg_cost(UNIT, 3, 0.0) == expected_cost(UNIT, 3)
    with pytest.raises(ContractViolation):
        threshold_avg_cost(UNIT, 0, -1.0)


def test_threshold_range_checked():
    with pytest.raises(ContractViolation):
        stationary_dist(UNIT, 60)
    with pytest.raises(ContractViolation):
        stationary_dist(UNIT, -2)


def test_best_threshold_edges():
    p = ServiceParams(5, 5, 20)
    assert best_threshold(p, 0.0) == 0
    assert best_threshold(p, 1e6) == 19


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(1.0, 10.0), st.integers(0, 5))
def test_closed_form_matches_linear_solve(rho, mu, R):
    p = ServiceParams(rho * mu, mu, 60)
    assert np.max(np.abs(stationary_dist(p, R).probs - stationary_dist_linear(p, R))) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 8.0), st.floats(1.0, 10.0), st.integers(5, 40))
def test_passive_mass_and_cost_increase_in_R(rho, mu, s_max):
    p = ServiceParams(rho * mu, mu, s_max)
    P = [passive_mass(p, R) for R in range(s_max)]
    C = [expected_cost(p, R) for R in range(s_max)]
    assert np.all(np.diff(P) > 0)
    assert np.all(np.diff(C) > 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 8.0), st.floats(1.0, 10.0), st.integers(5, 40))
def test_best_threshold_monotone_in_W(rho, mu, s_max):
    p = ServiceParams(rho * mu, mu, s_max)
    grid = np.linspace(0, 2 * s_max / p.lam, 60)
    Rs = [best_threshold(p, W) for W in grid]
    assert np.all(np.diff(Rs) >= 0)


# ---------------------------------------------------------------------------
# value iteration and policy evaluation


def test_single_service_optimum_is_always_active():
    cfg = SystemConfig((ServiceParams(5, 5, 15),), 1)
    sol = value_iteration(cfg)
    # span stop 1e-9 on V bounds the error in f by about 1e-9 * rate / 2
    assert sol.f == pytest.approx(expected_cost(cfg.services[0], 0), abs=1e-7)
    assert not sol.action[0, 0] and sol.action[1:, 0].all()


def test_single_service_subsidized_policy_is_threshold():
    p = ServiceParams(5, 5, 15)
    for W in (0.3, 0.8, 1.5):
        act = value_iteration(SystemConfig((p,), 1), subsidy=W).action[:, 0]
        R = best_threshold(p, W)
        # passive set is {0..R}, active above
        np.testing.assert_array_equal(act, np.arange(16) > R)


def test_value_iteration_symmetry_and_policy_cost():
    cfg = SystemConfig.homogeneous(2, 1, 10, 5, 15)
    sol = value_iteration(cfg)
    served = np.where(sol.action.any(-1), np.argmax(sol.action, -1), -1)
    off = ~np.eye(16, dtype=bool)
    # swapping coordinates swaps the served service away from the diagonal
    swapped = np.where(served.T >= 0, 1 - served.T, -1)
    assert np.array_equal(served[off], swapped[off])
    assert exact_policy_cost(cfg, sol.action) == pytest.approx(sol.f, abs=1e-6)
    assert np.all(sol.action.sum(-1) <= 1)


def test_value_iteration_budget():
    cfg = SystemConfig.homogeneous(2, 1, 10, 5, 40)
    with pytest.raises(ResourceBudgetError):
        value_iteration(cfg, budget=100)
    with pytest.raises(ResourceBudgetError):
        value_iteration(cfg, budget=2000)  # grid fits but the iteration cap does not


def test_exact_policy_cost_single_threshold():
    p = ServiceParams(7, 5, 25)
    cfg = SystemConfig((p,), 1)
    for R in (0, 2, 6):
        amap = threshold_action_map(cfg, [R])
        assert exact_policy_cost(cfg, amap) == pytest.approx(expected_cost(p, R), abs=1e-10)


def test_exact_policy_cost_accepts_callable():
    cfg = SystemConfig.homogeneous(2, 1, 5, 5, 8)
    pol = lambda s: np.array([s[0] > 0, s[0] == 0 and s[1] > 0])
    amap = np.zeros(cfg.shape + (2,), dtype=bool)
    for i in range(9):
        for j in range(9):
            amap[i, j] = pol(np.array([i, j]))
    assert exact_policy_cost(cfg, pol) == pytest.approx(exact_policy_cost(cfg, amap))


def test_policy_capacity_checked():
    cfg = SystemConfig.homogeneous(2, 1, 5, 5, 4)
    with pytest.raises(ContractViolation):
        policy_stationary(cfg, np.ones(cfg.shape + (2,), dtype=bool))


def test_closed_classes_detects_two_sinks():
    Q = sparse.csr_matrix(np.array([[-2.0, 1.0, 1.0], [0, 0, 0], [0, 0, 0]]))
    classes = closed_classes(Q)
    assert sorted(c.tolist() for c in classes) == [[1], [2]]


# ---------------------------------------------------------------------------
# relaxed problem


def test_relaxed_value_slack_capacity():
    cfg = SystemConfig.from_rates([10, 20], [5, 5], 20, 2)
    sol = relaxed_value(cfg)
    assert sol.subsidy == 0.0
    assert sol.value == pytest.approx(sum(expected_cost(p, 0) for p in cfg.services))


def test_relaxed_value_lower_bounds_optimum():
    cfg = SystemConfig.homogeneous(2, 1, 20, 5, 30)
    sol = relaxed_value(cfg)
    f = value_iteration(cfg, budget=10**8).f
    assert sol.bracketed
    assert sol.thresholds[0] == sol.thresholds[1]
    assert sol.value <= f + 1e-9
    # the subsidy is the left limit of the crossing, where the count is still >= K
    assert sol.active_count >= 1.0
    assert sum(1 - passive_mass(p, best_threshold(p, sol.subsidy + 1e-5)) for p in cfg.services) <= 1.0


def test_relaxed_value_theta_override():
    cfg = SystemConfig.homogeneous(2, 1, 20, 5, 20)
    alt = relaxed_value(cfg, theta=[(10, 5), (10, 5)])
    ref = relaxed_value(SystemConfig.homogeneous(2, 1, 10, 5, 20))
    assert alt.value == pytest.approx(ref.value)


# ---------------------------------------------------------------------------
# indifference oracle


def test_indifference_subsidy_unit_load_state1():
    # at state 1 the oracle must land on the R=0 vs R=1 comparison ratio
    p = ServiceParams(5, 5, 20)
    want = ((E / (E - 1) - 1) / 5) / (1 / (E - 1) - 1 / E)
    assert parking_margin(p, want) > 0
    assert indifference_subsidy(p, 1) == pytest.approx(want, rel=1e-6)
    assert indifference_subsidy(p, 0) == 0.0
