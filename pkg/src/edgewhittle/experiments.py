"""Desk-scale experiment drivers: optimality gap, switching curve, convergence, MSE vs N."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .exact import exact_policy_cost, value_iteration
from .model import ServiceParams, SystemConfig
from .qlearn import RateSchedules, episodes_to_tolerance, run_epsilon_greedy_baseline, run_q_whittle
from .sim import IndexPolicy, make_rng, run_policy
from .ucb import UcbConfig, candidate_grid, run_ucb_whittle
from .whittle import index_policy_map, tables_for, whittle_table

TABLE1_REFERENCE = {1: 4.46, 2: 3.35, 3: 3.11, 4: 1.06, 5: 1.231, 6: 0.706, 7: 2.55}


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Order-preserving map; each item must carry its own RNG stream."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Optimality gap of the index policy (two identical services, one slot)


@dataclass
class GapRow:
    ratio: float
    s_max: int
    f_opt: float
    whittle_cost: float
    gap_pct: float
    iterations: int


def optimality_gap(config: SystemConfig, budget: int = 10**8) -> GapRow:
    sol = value_iteration(config, budget=budget)
    amap = index_policy_map(config, tables_for(config))
    cw = exact_policy_cost(config, amap, budget=budget)
    p = config.services[0]
    return GapRow(p.lam / p.mu, p.s_max, sol.f, cw, 100.0 * (cw - sol.f) / sol.f, sol.iterations)


def run_table1(ratios: Sequence[float] = range(1, 8), mu: float = 5.0, s_max: int = 40,
               sweep: Sequence[int] = (30, 40, 50), threads: int = 1) -> list[GapRow]:
    """Gap rows for every (s_max, ratio); the primary s_max comes first."""
    grid = [s_max] + [s for s in sweep if s != s_max]
    pts = [(sm, r) for sm in grid for r in ratios]
    return parallel_map(
        lambda x: optimality_gap(SystemConfig.homogeneous(2, 1, x[1] * mu, mu, x[0])), pts, threads
    )


# ---------------------------------------------------------------------------
# Switching curve


@dataclass
class SwitchingCurve:
    optimal: np.ndarray  # served service id per joint state, -1 for none
    index_rule: np.ndarray
    agreement: float
    f_opt: float
    whittle_cost: float


def served(action_map: np.ndarray) -> np.ndarray:
    return np.where(action_map.any(axis=-1), np.argmax(action_map, axis=-1), -1)


def run_switching_curve(lam1: float = 20.0, lam2: float = 30.0, mu: float = 5.0,
                        s_max: int = 40, budget: int = 10**8) -> SwitchingCurve:
    config = SystemConfig.from_rates([lam1, lam2], [mu, mu], s_max, 1)
    sol = value_iteration(config, budget=budget)
    amap = index_policy_map(config, tables_for(config))
    agree = float(np.mean(np.all(sol.action == amap, axis=-1)))
    return SwitchingCurve(served(sol.action), served(amap), agree, sol.f,
                          exact_policy_cost(config, amap, budget=budget))


# ---------------------------------------------------------------------------
# Convergence of learned indices


@dataclass
class ConvergenceTraces:
    truth: np.ndarray  # (s_max,)
    traces: dict[str, np.ndarray]  # algorithm -> (seeds, episodes, s_max)
    finals: dict[str, np.ndarray]  # algorithm -> (seeds, s_max)
    episodes_to_tol: dict[str, list]


def ucb_instance(mu: float = 5.0, s_max: int = 5, lams=(10.0, 15.0)) -> SystemConfig:
    """Two services, one slot; the learned table of service 0 is traced."""
    return SystemConfig.from_rates(list(lams), [mu] * len(lams), s_max, max(1, len(lams) // 2))


def run_convergence(lam: float = 10.0, mu: float = 5.0, s_max: int = 5, H: int = 100,
                    episodes: int = 200, seeds: Sequence[int] = range(10),
                    schedules: RateSchedules = RateSchedules(), eps_explore: float = 0.5,
                    q_mode: str = "relative", ucb_cfg: UcbConfig | None = None,
                    ucb_lams=(10.0, 15.0), tol: float = 0.1, base_seed: int = 0,
                    threads: int = 1) -> ConvergenceTraces:
    params = ServiceParams(lam, mu, s_max)
    truth = whittle_table(params).values.copy()
    ucfg_sys = ucb_instance(mu, s_max, ucb_lams)
    cands = candidate_grid(ucfg_sys)
    cfg = ucb_cfg or UcbConfig.theoretical(episodes * H, cands.rate_lower_bound)

    def one(seed):
        q = run_q_whittle(params, episodes, H, schedules, make_rng(base_seed, seed, 1), mode=q_mode)
        b = run_epsilon_greedy_baseline(params, episodes, H, schedules, eps_explore,
                                        make_rng(base_seed, seed, 2))
        u = run_ucb_whittle(ucfg_sys, cands, cfg, episodes, H, make_rng(base_seed, seed, 3))
        return (q.history[:, 0], q.table[0]), (b.history[:, 0], b.table[0]), \
            (u.tables[:, 0, :], u.tables[-1, 0, :])

    out = parallel_map(one, list(seeds), threads)
    names = ("q-whittle", "eps-greedy", "ucb-whittle")
    traces = {n: np.stack([o[j][0] for o in out]) for j, n in enumerate(names)}
    finals = {n: np.stack([o[j][1] for o in out]) for j, n in enumerate(names)}
    ett = {n: [episodes_to_tolerance(tr, truth, tol) for tr in traces[n]] for n in names}
    return ConvergenceTraces(truth, traces, finals, ett)


# ---------------------------------------------------------------------------
# MSE of expected cost against the true-index policy, versus N


TYPE_LAMS = (10.0, 15.0, 20.0, 25.0, 30.0)


def typed_config(n: int, mu: float = 5.0, s_max: int = 5, lams=TYPE_LAMS) -> SystemConfig:
    per = n // len(lams)
    if per * len(lams) != n:
        raise ValueError(f"N={n} must be a multiple of the number of types {len(lams)}")
    rates = [l for l in lams for _ in range(per)]
    return SystemConfig.from_rates(rates, [mu] * n, s_max, n // 2)


@dataclass
class MseResult:
    ns: list[int]
    mse: dict[str, np.ndarray]  # learner -> per-N MSE
    diffs: dict[str, np.ndarray]  # learner -> (len(ns), reps) per-service cost differences


def _learned_costs(config, learners, eval_events, rng_seed):
    """Paired long-run costs of each index table under common random numbers."""
    out = {}
    for name, values in learners.items():
        pol = IndexPolicy(values, config.capacity)
        out[name] = run_policy(config, pol, eval_events, make_rng(*rng_seed)).avg_cost
    return out


def run_mse_vs_n(ns: Sequence[int] = (10, 20, 30, 40, 50), episodes: int = 150, H: int = 100,
                 reps: int = 5, eval_events: int = 20_000, mu: float = 5.0, s_max: int = 5,
                 schedules: RateSchedules = RateSchedules(), eps_explore: float = 0.5,
                 q_mode: str = "relative", ucb_eps: float | None = None, base_seed: int = 0,
                 threads: int = 1) -> MseResult:
    """Per-service cost difference of learned vs true index policy, squared and averaged."""
    names = ("ucb-whittle", "q-whittle", "eps-greedy")

    def one(job):
        n, rep = job
        config = typed_config(n, mu, s_max)
        width = s_max + 1
        true_vals = IndexPolicy(tables_for(config), config.capacity).values
        q = run_q_whittle(config.services, episodes, H, schedules, make_rng(base_seed, n, rep, 1),
                          mode=q_mode)
        b = run_epsilon_greedy_baseline(config.services, episodes, H, schedules, eps_explore,
                                        make_rng(base_seed, n, rep, 2))
        cands = candidate_grid(config, classes=[i * len(TYPE_LAMS) // n for i in range(n)])
        ucfg = UcbConfig.theoretical(episodes * H, cands.rate_lower_bound, eps=ucb_eps)
        u = run_ucb_whittle(config, cands, ucfg, episodes, H, make_rng(base_seed, n, rep, 3),
                            benchmark=0.0)
        pad = lambda t: np.concatenate([t, t[:, -1:]], axis=1)[:, :width]
        learned = {
            "true": true_vals,
            "ucb-whittle": pad(u.tables[-1]),
            "q-whittle": pad(q.table),
            "eps-greedy": pad(b.table),
        }
        costs = _learned_costs(config, learned, eval_events, (base_seed, n, rep, 9))
        return {k: (costs[k] - costs["true"]) / n for k in names}

    jobs = [(n, r) for n in ns for r in range(reps)]
    res = parallel_map(one, jobs, threads)
    diffs = {k: np.array([[res[i * reps + r][k] for r in range(reps)] for i in range(len(ns))])
             for k in names}
    mse = {k: np.mean(diffs[k] ** 2, axis=1) for k in names}
    return MseResult(list(ns), mse, diffs)


def count_inversions(seq: Sequence[float]) -> int:
    """Number of adjacent increases in a sequence expected to decrease."""
    s = np.asarray(seq)
    return int(np.sum(np.diff(s) > 0))
