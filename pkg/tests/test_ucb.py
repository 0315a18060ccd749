import numpy as np
import pytest

from edgewhittle.exact import relaxed_value
from edgewhittle.model import ServiceParams, SystemConfig
from edgewhittle.sim import ARRIVAL, DEPARTURE, Event, make_rng, step
from edgewhittle.ucb import (
    CandidateSet,
    ConfidenceBall,
    EstimatorState,
    RelaxedValueCache,
    UcbConfig,
    candidate_grid,
    confidence_ball,
    gap,
    optimistic_param,
    run_ucb_whittle,
    update_estimates,
)

CFG = SystemConfig.from_rates([10.0, 15.0], [5.0, 5.0], 5, 1)


def test_interarrival_estimate_from_three_arrivals():
    cfg = SystemConfig((ServiceParams(1, 1, 50),), 1)
    est = EstimatorState.empty(cfg)
    assert est.arr_count[0] == 0 and np.isnan(est.m_lam[0])
    for pre, dt in ((0, 1.0), (1, 1.5), (2, 1.5)):
        update_estimates(est, [pre], [False], Event(0, ARRIVAL), dt)
    assert est.arr_count[0] == 2
    assert est.m_lam[0] == pytest.approx(1.5)


def test_delivery_estimate_concentrates():
    cfg = SystemConfig((ServiceParams(20, 5, 30),), 1)
    est = EstimatorState.empty(cfg)
    rng = make_rng(0)
    s = np.array([0])
    while est.del_count[0] < 10_000:
        a = [bool(s[0] > 0)]
        nxt, dt, ev = step(cfg, s, a, rng)
        est.update(s, a, ev, dt)
        s = nxt
    # each departure closes an exponential(mu) amount of per-customer work
    assert abs(est.m_mu[0] - 0.2) <= 3 * 0.2 / np.sqrt(est.del_count[0])


def test_radius_algebra():
    cfg = UcbConfig(delta=0.01, b=2.0, eps=0.1, tau_h=3.0, T=1000)
    assert cfg.K1 == 18.0
    L = np.log(2 * 1000.0**2 / 0.01)
    assert cfg.radius(4 * cfg.K1 * L, 2) == pytest.approx(0.5)
    r = cfg.radius([0, 10, 40], 2)
    assert np.isinf(r[0]) and r[1] == pytest.approx(2 * r[2])
    with pytest.raises(ValueError):
        UcbConfig(delta=0.1, b=1.0, eps=0.1, tau_h=1.0, T=10)


def test_theoretical_constants():
    cfg = UcbConfig.theoretical(20_000, rate_lb=4.0)
    assert cfg.delta == cfg.eps == 1 / 20_000
    assert cfg.tau_h == pytest.approx(np.log(20_000) / 4.0)


def test_candidate_grid_contains_truth():
    cands = candidate_grid(CFG)
    assert len(cands) == 9
    assert cands.index_of([10, 15], [5, 5]) == 4
    shared = candidate_grid(SystemConfig.homogeneous(4, 2, 10, 5, 5), classes=[0, 0, 1, 1])
    assert len(shared) == 9
    with pytest.raises(ValueError):
        CandidateSet(np.zeros((0, 2, 2)), 0.1)


def test_empty_counts_admit_everything():
    cands = candidate_grid(CFG)
    ball = confidence_ball(EstimatorState.empty(CFG), UcbConfig.theoretical(100, 1.0), cands)
    assert ball.members.tolist() == list(range(9))


def _ball(members):
    z = np.zeros(2)
    return ConfidenceBall(z, z, z, z, np.array(members, dtype=int))


def test_optimistic_param_rules():
    cands = candidate_grid(CFG)
    vals = RelaxedValueCache(CFG, cands)
    assert optimistic_param(_ball([6]), cands, vals, make_rng(0)) == 6
    draws = {optimistic_param(_ball([]), cands, vals, make_rng(0, k)) for k in range(40)}
    assert len(draws) > 3
    assert optimistic_param(_ball([]), cands, vals, make_rng(5)) == \
        optimistic_param(_ball([]), cands, vals, make_rng(5))
    every = [relaxed_value(CFG, cands.rates(c)).value for c in range(9)]
    assert optimistic_param(_ball(range(9)), cands, vals, make_rng(0)) == int(np.argmin(every))


def test_coverage_of_true_parameter():
    # 500 replications of 300 events; theta0 should sit in the ball almost always
    cfg = SystemConfig((ServiceParams(10, 5, 5),), 1)
    cands = candidate_grid(cfg)
    ucfg = UcbConfig.theoretical(300, cands.rate_lower_bound)
    true_id = cands.index_of([10], [5])
    hits = 0
    for r in range(500):
        rng = make_rng(12, r)
        est = EstimatorState.empty(cfg)
        s = np.array([0])
        for _ in range(300):
            a = [bool(s[0] > 0)]
            nxt, dt, ev = step(cfg, s, a, rng)
            est.update(s, a, ev, dt)
            s = nxt
        hits += true_id in confidence_ball(est, ucfg, cands).members
    assert hits / 500 >= 1 - 2 * ucfg.delta


def test_singleton_candidate_set_has_no_regret_bias():
    cands = CandidateSet(candidate_grid(CFG).thetas[[4]], 0.05)
    ucfg = UcbConfig.theoretical(100 * 60, cands.rate_lower_bound)
    res = run_ucb_whittle(CFG, cands, ucfg, 60, 100, make_rng(1))
    assert np.all(res.selected == 0)
    assert np.allclose(res.expected_regret, 0.0)
    se = res.regret.std(ddof=1) / np.sqrt(60)
    assert abs(res.regret.mean()) <= 3 * se


def test_run_is_deterministic():
    cands = candidate_grid(CFG)
    ucfg = UcbConfig.theoretical(100 * 20, cands.rate_lower_bound, eps=1 / np.e)
    a = run_ucb_whittle(CFG, cands, ucfg, 20, 100, make_rng(2))
    b = run_ucb_whittle(CFG, cands, ucfg, 20, 100, make_rng(2))
    np.testing.assert_array_equal(a.selected, b.selected)
    np.testing.assert_array_equal(a.episode_costs, b.episode_costs)
    assert a.tables.shape == (20, 2, 5)


def test_gap():
    cands = candidate_grid(CFG)
    true_id = 4
    g = gap(CFG, cands, true_id)
    vals = [relaxed_value(CFG, cands.rates(c)).value for c in range(9)]
    v0 = vals[true_id]
    assert g == pytest.approx(v0 - max(v for v in vals if not np.isclose(v, v0, rtol=1e-12, atol=0)))
    one = CandidateSet(cands.thetas[[true_id]], cands.lower_bound)
    assert gap(CFG, one, 0) is None
    dup = CandidateSet(np.concatenate([cands.thetas, cands.thetas[[true_id]]]), cands.lower_bound)
    assert gap(CFG, dup, true_id) == pytest.approx(g)
