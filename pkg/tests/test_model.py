import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgewhittle.errors import ContractViolation
from edgewhittle.model import ServiceParams, SystemConfig, check_action, check_state, cost, rates


@pytest.mark.parametrize("lam,s,want", [(10, 5, 0.5), (7, 0, 0.0), (25, 3, 0.12)])
def test_cost_examples(lam, s, want):
    assert cost(ServiceParams(lam, 5, 10), s) == pytest.approx(want)


def test_cost_rejects_negative_queue():
    with pytest.raises(ContractViolation):
        cost(ServiceParams(1, 1, 5), -1)


def test_rates_examples():
    p = ServiceParams(4, 5, 10)
    assert rates(p, 3, True) == (4, 15)
    assert rates(p, 3, False) == (4, 0)
    assert rates(ServiceParams(4, 5, 10), 0, True)[1] == 0
    # arrivals are dropped at a full queue
    assert rates(p, 10, True) == (0.0, 50.0)


@pytest.mark.parametrize("kw", [dict(lam=0, mu=1, s_max=5), dict(lam=1, mu=-1, s_max=5),
                                dict(lam=1, mu=1, s_max=1), dict(lam=1, mu=1, s_max=2.5)])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        ServiceParams(**kw)


def test_config_shapes_and_validation():
    cfg = SystemConfig.from_rates([10, 20, 30], [5, 5, 5], [4, 5, 6], 2)
    assert cfg.shape == (5, 6, 7)
    assert cfg.n_states == 210
    np.testing.assert_array_equal(cfg.lams, [10, 20, 30])
    with pytest.raises(ValueError):
        SystemConfig.homogeneous(2, 0, 1, 1, 5)
    with pytest.raises(ValueError):
        SystemConfig((), 1)
    # the state count stays exact for grids larger than int64
    assert SystemConfig.homogeneous(50, 25, 10, 5, 5).n_states == 6**50


def test_state_and_action_checks():
    cfg = SystemConfig.homogeneous(3, 1, 2, 1, 4)
    with pytest.raises(ContractViolation):
        check_state(cfg, [0, 5, 0])
    with pytest.raises(ContractViolation):
        check_state(cfg, [0, 1])
    with pytest.raises(ContractViolation):
        check_action(cfg, [True, True, False])
    assert check_action(cfg, [False, True, False]).sum() == 1


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.integers(2, 40), st.integers(0, 40), st.booleans())
def test_rate_invariants(lam, mu, s_max, s, a):
    p = ServiceParams(lam, mu, s_max)
    s = min(s, s_max)
    b, d = rates(p, s, a)
    assert 0 <= b + d <= lam + mu * s_max
    if not a:
        assert d == 0
    assert cost(p, s) <= cost(p, min(s + 1, s_max))
