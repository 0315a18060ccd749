"""UCB-Whittle: optimistic selection over a finite candidate set.

Parameters are handled in mean-time form, ``(1/lam, 1/mu)`` per service,
which is what the empirical estimators average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .exact import relaxed_value
from .model import ServiceParams, SystemConfig
from .sim import ARRIVAL, DEPARTURE, Event, IndexPolicy, _child, run_episodic, exact_episode_cost, \
    benchmark_cost
from .whittle import tables_for


@dataclass(frozen=True)
class CandidateSet:
    """Finite list of parameter vectors; ``thetas[c, i] = (m_lam, m_mu)``."""

    thetas: np.ndarray
    lower_bound: float

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=float)
        if th.ndim != 3 or th.shape[-1] != 2 or th.shape[0] == 0:
            raise ValueError("candidates must have shape (count, N, 2) and be non-empty")
        if np.any(th < self.lower_bound) or self.lower_bound <= 0:
            raise ValueError("all mean times must be at least the positive lower bound")
        object.__setattr__(self, "thetas", th)

    def __len__(self):
        return self.thetas.shape[0]

    @property
    def n(self) -> int:
        return self.thetas.shape[1]

    def rates(self, c: int) -> list[tuple[float, float]]:
        return [(1.0 / ml, 1.0 / mm) for ml, mm in self.thetas[c]]

    def config(self, base: SystemConfig, c: int) -> SystemConfig:
        return SystemConfig(
            tuple(ServiceParams(l, m, p.s_max) for (l, m), p in zip(self.rates(c), base.services)),
            base.capacity,
        )

    @property
    def rate_lower_bound(self) -> float:
        """Smallest rate appearing in the set."""
        return float(1.0 / self.thetas.max())

    def index_of(self, lams, mus, rtol=1e-12) -> int | None:
        target = np.stack([1.0 / np.asarray(lams, float), 1.0 / np.asarray(mus, float)], axis=-1)
        hit = np.flatnonzero(np.all(np.isclose(self.thetas, target, rtol=rtol, atol=0), axis=(1, 2)))
        return int(hit[0]) if hit.size else None


def candidate_grid(config: SystemConfig, classes: Sequence[int] | None = None,
                   lam_factors=(0.8, 1.0, 1.25), mu_factors=(1.0,)) -> CandidateSet:
    """Cartesian grid around the true rates.

    Services sharing a class label move together.  The all-ones factor point
    reproduces the truth, so the true parameter is always a member.
    """
    classes = list(range(config.n)) if classes is None else list(classes)
    labels = sorted(set(classes))
    per_class = [list(product(lam_factors, mu_factors)) for _ in labels]
    thetas = []
    for combo in product(*per_class):
        th = np.empty((config.n, 2))
        for i, p in enumerate(config.services):
            fl, fm = combo[labels.index(classes[i])]
            th[i] = (1.0 / (p.lam * fl), 1.0 / (p.mu * fm))
        thetas.append(th)
    thetas = np.array(thetas)
    return CandidateSet(thetas, float(thetas.min()))


@dataclass
class EstimatorState:
    """Running sums for per-service mean inter-arrival and delivery times.

    Inter-arrival exposure is counted from the first arrival onward and only
    while the queue can accept arrivals.  Delivery exposure is ``s * dt`` while
    the service is active, so its ratio to the departure count estimates 1/mu.
    """

    arr_sum: np.ndarray
    arr_count: np.ndarray
    del_sum: np.ndarray
    del_count: np.ndarray
    _open: np.ndarray
    _seen: np.ndarray
    s_max: np.ndarray

    @classmethod
    def empty(cls, config: SystemConfig):
        n = config.n
        z = lambda: np.zeros(n)
        return cls(z(), np.zeros(n, int), z(), np.zeros(n, int), z(), np.zeros(n, bool), config.s_maxes)

    def update(self, pre_state, action, event: Event, dt: float):
        pre = np.asarray(pre_state)
        self._open += np.where(self._seen & (pre < self.s_max), dt, 0.0)
        self.del_sum += pre * np.asarray(action, bool) * dt
        i = event.service
        if event.kind == ARRIVAL:
            if self._seen[i]:
                self.arr_sum[i] += self._open[i]
                self.arr_count[i] += 1
            self._seen[i] = True
            self._open[i] = 0.0
        elif event.kind == DEPARTURE:
            self.del_count[i] += 1
        return self

    @property
    def m_lam(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.arr_count > 0, self.arr_sum / np.maximum(self.arr_count, 1), np.nan)

    @property
    def m_mu(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.del_count > 0, self.del_sum / np.maximum(self.del_count, 1), np.nan)


def update_estimates(est: EstimatorState, pre_state, action, event: Event, sojourn: float) -> EstimatorState:
    return est.update(pre_state, action, event, sojourn)


@dataclass(frozen=True)
class UcbConfig:
    delta: float
    b: float
    eps: float
    tau_h: float
    T: int
    K1_override: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1 or not 0 < self.eps < 1:
            raise ValueError("delta and eps must lie in (0, 1)")
        if not self.b > 1:
            raise ValueError("b must exceed 1")
        if not self.tau_h > 0 or self.T < 1:
            raise ValueError("tau_h and T must be positive")
        if self.K1_override is not None and not self.K1_override > 0:
            raise ValueError("K1 must be positive")

    @property
    def K1(self) -> float:
        return self.K1_override if self.K1_override is not None else 2.0 * self.tau_h**2

    @classmethod
    def theoretical(cls, T: int, rate_lb: float, eps: float | None = None, delta: float | None = None,
                    b: float = 2.0):
        """delta = eps = 1/T and tau_h = -log(eps)/rate_lb unless overridden."""
        eps = 1.0 / T if eps is None else eps
        delta = 1.0 / T if delta is None else delta
        return cls(delta, b, eps, -np.log(eps) / rate_lb, T)

    def radius(self, count, n_services: int):
        count = np.asarray(count, dtype=float)
        log_term = np.log(n_services * float(self.T) ** self.b / self.delta)
        with np.errstate(divide="ignore"):
            return np.where(count > 0, np.sqrt(self.K1 / np.maximum(count, 1) * log_term), np.inf)


@dataclass
class ConfidenceBall:
    m_lam: np.ndarray
    m_mu: np.ndarray
    r_lam: np.ndarray
    r_mu: np.ndarray
    members: np.ndarray  # candidate ids inside every interval


def confidence_ball(est: EstimatorState, cfg: UcbConfig, candidates: CandidateSet) -> ConfidenceBall:
    n = candidates.n
    r_lam = cfg.radius(est.arr_count, n)
    r_mu = cfg.radius(est.del_count, n)
    m_lam, m_mu = est.m_lam, est.m_mu
    th = candidates.thetas

    def inside(vals, centre, rad):
        with np.errstate(invalid="ignore"):
            return np.isinf(rad) | (np.abs(vals - centre) <= rad)

    ok = inside(th[..., 0], m_lam, r_lam) & inside(th[..., 1], m_mu, r_mu)
    return ConfidenceBall(m_lam, m_mu, r_lam, r_mu, np.flatnonzero(ok.all(axis=1)))


class RelaxedValueCache:
    """Memoized relaxed values per candidate id."""

    def __init__(self, base: SystemConfig, candidates: CandidateSet):
        self.base, self.candidates = base, candidates
        self._cache: dict[int, float] = {}

    def __call__(self, c: int) -> float:
        if c not in self._cache:
            self._cache[c] = relaxed_value(self.base, self.candidates.rates(c)).value
        return self._cache[c]


def optimistic_param(ball: ConfidenceBall, candidates: CandidateSet, values: RelaxedValueCache,
                     rng: np.random.Generator) -> int:
    """Cheapest member of the ball by relaxed value; uniform draw if the ball is empty."""
    if ball.members.size == 0:
        return int(rng.integers(len(candidates)))
    vals = np.array([values(int(c)) for c in ball.members])
    return int(ball.members[int(np.argmin(vals))])


class UcbWhittleLearner:
    """Episodic learner: re-select the optimistic candidate at each episode start."""

    def __init__(self, config: SystemConfig, candidates: CandidateSet, cfg: UcbConfig,
                 rng: np.random.Generator):
        if candidates.n != config.n:
            raise ContractViolation("candidate vectors must cover every service")
        self.config, self.candidates, self.cfg = config, candidates, cfg
        self.rng = rng
        self.est = EstimatorState.empty(config)
        self.values = RelaxedValueCache(config, candidates)
        self._policies: dict[int, IndexPolicy] = {}
        self.selected: list[int] = []
        self.ball_sizes: list[int] = []

    def policy_for(self, c: int) -> IndexPolicy:
        if c not in self._policies:
            self._policies[c] = IndexPolicy(tables_for(self.candidates.config(self.config, c)),
                                            self.config.capacity)
        return self._policies[c]

    def begin_episode(self, k, history):
        ball = confidence_ball(self.est, self.cfg, self.candidates)
        c = optimistic_param(ball, self.candidates, self.values, self.rng)
        self.selected.append(c)
        self.ball_sizes.append(int(ball.members.size))
        return self.policy_for(c)

    def observe(self, pre_state, action, event, sojourn, post_state):
        self.est.update(pre_state, action, event, sojourn)


@dataclass
class UcbResult:
    selected: np.ndarray
    ball_sizes: np.ndarray
    episode_costs: np.ndarray
    regret: np.ndarray
    cumulative_regret: np.ndarray
    benchmark: float
    tables: np.ndarray  # (episodes, N, s_max) index table of the selected candidate
    expected_regret: np.ndarray | None = None
    estimates: dict = field(default_factory=dict)


def episode_benchmark(config: SystemConfig, H: int, rng, n_mc: int = 200,
                      exact_limit: int = 20_000) -> float:
    """Expected H-event cost of the true index policy: exact when the grid is small."""
    if config.n_states <= exact_limit:
        from .whittle import index_policy_map
        return exact_episode_cost(config, index_policy_map(config, tables_for(config)), H)
    return benchmark_cost(config, H, rng, n=n_mc)


def run_ucb_whittle(config: SystemConfig, candidates: CandidateSet, cfg: UcbConfig, episodes: int,
                    H: int, rng: np.random.Generator, benchmark: float | None = None) -> UcbResult:
    """Full episode loop; ``config`` holds the true parameters."""
    learner = UcbWhittleLearner(config, candidates, cfg, _child(rng))
    if benchmark is None:
        benchmark = episode_benchmark(config, H, _child(rng))
    res = run_episodic(config, learner, episodes, H, rng, benchmark=benchmark)
    sel = np.array(learner.selected)
    tables = np.stack([learner.policy_for(int(c)).values[:, :-1] for c in sel])
    exp_reg = None
    if config.n_states <= 20_000:
        from .whittle import index_policy_map
        per = {}
        for c in np.unique(sel):
            cand_tables = tables_for(candidates.config(config, int(c)))
            per[int(c)] = exact_episode_cost(config, index_policy_map(config, cand_tables), H) - benchmark
        exp_reg = np.array([per[int(c)] for c in sel])
    return UcbResult(sel, np.array(learner.ball_sizes), res.episode_costs, res.regret,
                     res.cumulative_regret, res.benchmark, tables, exp_reg,
                     {"m_lam": learner.est.m_lam, "m_mu": learner.est.m_mu,
                      "arr_count": learner.est.arr_count, "del_count": learner.est.del_count})


def gap(config: SystemConfig, candidates: CandidateSet, true_id: int, rtol: float = 1e-12):
    """Relaxed-value gap between the truth and the costliest non-equivalent candidate.

    Returns None when every candidate is cost-equivalent to the truth.
    """
    vals = RelaxedValueCache(config, candidates)
    v0 = vals(true_id)
    others = [vals(c) for c in range(len(candidates)) if not np.isclose(vals(c), v0, rtol=rtol, atol=0)]
    if not others:
        return None
    return v0 - max(others)
