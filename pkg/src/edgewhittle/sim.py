"""Event-driven simulation of the coupled queues.

Every call draws from a caller-supplied ``numpy.random.Generator``; use
:func:`make_rng` to derive independent, reproducible streams from a scenario
seed and a run index.
"""

from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ContractViolation, DeadStateError, ProtocolError
from .model import SystemConfig, check_action
from .whittle import WhittleTable, tables_for

ARRIVAL = "arrival"
DEPARTURE = "departure"


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)`` so each run has its own stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class Event:
    service: int
    kind: str  # ARRIVAL or DEPARTURE


@dataclass
class SimClock:
    t: float = 0.0
    events: int = 0

    def advance(self, dt: float):
        self.t += dt
        self.events += 1


@dataclass(frozen=True)
class EpisodeSchedule:
    H: int
    episodes: int

    def __post_init__(self):
        if self.H < 1 or self.episodes < 1:
            raise ValueError("H and episode count must be positive")

    def start(self, k: int) -> int:
        """First event index of episode ``k`` (0-based)."""
        return k * self.H


@dataclass(frozen=True)
class TraceRecord:
    event_index: int
    time: float
    pre_state: tuple[int, ...]
    action: tuple[bool, ...]
    service: int
    event_type: str
    sojourn: float
    cost: float
    state_after: tuple[int, ...]


class IndexPolicy:
    """Top-K index rule backed by a dense ``N x (s_max+1)`` lookup matrix."""

    def __init__(self, tables: Sequence[WhittleTable] | np.ndarray, capacity: int):
        if isinstance(tables, np.ndarray):
            self.values = np.asarray(tables, dtype=float)
        else:
            width = max(t.params.s_max for t in tables) + 1
            self.values = np.stack([t(np.arange(width)) for t in tables])
        self.capacity = int(capacity)
        self._ids = np.arange(self.values.shape[0])

    def __call__(self, state: np.ndarray) -> np.ndarray:
        w = self.values[self._ids, np.minimum(state, self.values.shape[1] - 1)]
        w = np.where(state > 0, w, -np.inf)
        order = np.lexsort((self._ids, -w))[: self.capacity]
        action = np.zeros(state.size, dtype=bool)
        action[order] = state[order] > 0
        return action

    @classmethod
    def from_config(cls, config: SystemConfig):
        return cls(tables_for(config), config.capacity)


def map_policy(action_map: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a tabulated action map (shape grid + (N,)) as a policy."""
    return lambda state: action_map[tuple(state)]


def _child(rng: np.random.Generator) -> np.random.Generator:
    """Independent side stream that leaves the parent's draws untouched."""
    return np.random.default_rng(rng.bit_generator.seed_seq.spawn(1)[0])


def _rates(config: SystemConfig, state, action):
    birth = np.where(state < config.s_maxes, config.lams, 0.0)
    death = config.mus * state * action
    return birth, death


def step(config: SystemConfig, state, action, rng: np.random.Generator):
    """Sample the next transition by competing exponentials.

    Returns ``(next_state, sojourn, Event)``.
    """
    state = np.asarray(state, dtype=int)
    action = check_action(config, action)
    birth, death = _rates(config, state, action)
    r = np.concatenate([birth, death])
    total = r.sum()
    if total <= 0:
        raise DeadStateError(f"state {state.tolist()} has no outgoing transitions")
    dt = rng.standard_exponential() / total
    j = min(int(np.searchsorted(np.cumsum(r), rng.random() * total, side="right")), r.size - 1)
    nxt = state.copy()
    n = config.n
    if j < n:
        nxt[j] += 1
        return nxt, dt, Event(j, ARRIVAL)
    nxt[j - n] -= 1
    return nxt, dt, Event(j - n, DEPARTURE)


@dataclass
class SimResult:
    avg_cost: float
    total_time: float
    events: int
    mean_queue: np.ndarray
    throughput: np.ndarray
    arrival_rate: np.ndarray  # accepted arrivals per unit time
    occupancy: np.ndarray  # time fraction per (service, queue length)
    final_state: np.ndarray
    latency_mean: np.ndarray | None = None
    latency_se: np.ndarray | None = None
    trace: list[TraceRecord] = field(default_factory=list)


def _core(config, policy, n_events, rng, state, observer=None, trace=None, t0=0.0, ev0=0,
          occupancy=None, latency=None):
    """Run ``n_events`` transitions; returns (cost integral, elapsed time, counts)."""
    N = config.n
    lams, mus, smax = config.lams, config.mus, config.s_maxes
    inv_lam = 1.0 / lams
    arrivals = np.zeros(N, dtype=np.int64)
    departures = np.zeros(N, dtype=np.int64)
    area = np.zeros(N)
    cost_int = 0.0
    t = t0
    exps = rng.standard_exponential(n_events)
    us = rng.random(n_events)
    ids = np.arange(N)
    for e in range(n_events):
        action = np.asarray(policy(state), dtype=bool)
        if observer is not None:
            observer.check(action)
        birth = np.where(state < smax, lams, 0.0)
        death = mus * state * action
        r = np.concatenate([birth, death])
        total = r.sum()
        if total <= 0:
            raise DeadStateError(f"state {state.tolist()} has no outgoing transitions")
        dt = exps[e] / total
        j = min(int(np.searchsorted(np.cumsum(r), us[e] * total, side="right")), 2 * N - 1)
        c = float(state @ inv_lam)
        cost_int += c * dt
        area += state * dt
        if occupancy is not None:
            occupancy[ids, state] += dt
        pre = state
        state = state.copy()
        t += dt
        if j < N:
            state[j] += 1
            arrivals[j] += 1
            svc, kind = j, ARRIVAL
        else:
            svc, kind = j - N, DEPARTURE
            state[svc] -= 1
            departures[svc] += 1
        if latency is not None:
            latency.record(svc, kind, t)
        if observer is not None:
            observer.observe(pre, action, Event(svc, kind), dt, state)
        if trace is not None:
            trace.append(TraceRecord(ev0 + e, t, tuple(pre.tolist()), tuple(action.tolist()), svc,
                                     kind, dt, c, tuple(state.tolist())))
    return state, cost_int, t - t0, arrivals, departures, area


def _core_map(config, action_map, n_events, rng, state, latency=None):
    """Fast path for a tabulated stationary policy; same draws as :func:`_core`."""
    N = config.n
    shape = config.shape
    if action_map.shape != shape + (N,):
        raise ContractViolation(f"action map must have shape {shape + (N,)}")
    if np.any(action_map.sum(axis=-1) > config.capacity):
        raise ContractViolation("action map violates the capacity constraint")
    S = np.stack(np.meshgrid(*[np.arange(m) for m in shape], indexing="ij"), axis=-1).reshape(-1, N)
    A = action_map.reshape(-1, N)
    r = np.concatenate([np.where(S < config.s_maxes, config.lams, 0.0), config.mus * S * A], axis=1)
    cum = np.cumsum(r, axis=1)
    total = r.sum(axis=1)
    cost = S @ (1.0 / config.lams)
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(N)])
    jump = np.concatenate([strides, -strides])
    cum_l, total_l, cost_l, jump_l = cum.tolist(), total.tolist(), cost.tolist(), jump.tolist()
    exps = rng.standard_exponential(n_events).tolist()
    us = rng.random(n_events).tolist()
    f = int(np.ravel_multi_index(tuple(state), shape))
    occ = np.zeros(S.shape[0])
    js = np.empty(n_events, dtype=np.int64)
    cost_int, t, last = 0.0, 0.0, 2 * N - 1
    for e in range(n_events):
        tot = total_l[f]
        if tot <= 0:
            raise DeadStateError(f"state {S[f].tolist()} has no outgoing transitions")
        dt = exps[e] / tot
        row = cum_l[f]
        x = us[e] * tot
        j = 0
        while j < last and row[j] <= x:
            j += 1
        cost_int += cost_l[f] * dt
        occ[f] += dt
        t += dt
        js[e] = j
        f += jump_l[j]
        if latency is not None:
            latency.record(j % N, ARRIVAL if j < N else DEPARTURE, t)
    counts = np.bincount(js, minlength=2 * N)
    area = occ @ S
    return S[f].copy(), cost_int, t, counts[:N], counts[N:], area, occ.reshape(shape)


class _LatencyTracker:
    """Per-customer sojourn tracking; departing customers are picked uniformly."""

    def __init__(self, n, rng):
        self.waiting = [[] for _ in range(n)]
        self.done = [[] for _ in range(n)]
        self.rng = rng

    def record(self, svc, kind, t):
        q = self.waiting[svc]
        if kind == ARRIVAL:
            q.append(t)
        else:
            k = int(self.rng.integers(len(q)))
            q[k], q[-1] = q[-1], q[k]
            self.done[svc].append(t - q.pop())


def _batch_se(x: np.ndarray, batches: int = 30) -> float:
    if x.size < 2 * batches:
        return float(np.std(x, ddof=1) / np.sqrt(max(x.size, 1))) if x.size > 1 else np.inf
    means = np.array([b.mean() for b in np.array_split(x, batches)])
    return float(means.std(ddof=1) / np.sqrt(batches))


def run_policy(
    config: SystemConfig,
    policy: Callable[[np.ndarray], np.ndarray],
    total_events: int,
    rng: np.random.Generator,
    start=None,
    track_latency: bool = False,
    keep_trace: bool = False,
) -> SimResult:
    """Simulate ``total_events`` transitions and report time averages.

    ``policy`` is a state -> action callable or a tabulated action map; the
    map takes a faster path that consumes the same random draws.
    """
    if total_events < 1:
        raise ContractViolation("total_events must be at least 1")
    state = np.zeros(config.n, dtype=int) if start is None else np.array(start, dtype=int)
    occ = np.zeros((config.n, int(config.s_maxes.max()) + 1))
    lat = _LatencyTracker(config.n, _child(rng)) if track_latency else None
    if lat is not None:
        for i, s in enumerate(state):
            lat.waiting[i].extend([0.0] * int(s))
    trace = [] if keep_trace else None
    if isinstance(policy, np.ndarray) and not keep_trace:
        state, cint, T, arr, dep, area, joint = _core_map(config, policy, total_events, rng, state, lat)
        for i in range(config.n):
            other = tuple(k for k in range(config.n) if k != i)
            marg = joint.sum(axis=other) if other else joint
            occ[i, : marg.size] = marg
    else:
        if isinstance(policy, np.ndarray):
            policy = map_policy(policy)
        state, cint, T, arr, dep, area = _core(config, policy, total_events, rng, state,
                                               trace=trace, occupancy=occ, latency=lat)
    res = SimResult(
        avg_cost=cint / T,
        total_time=T,
        events=total_events,
        mean_queue=area / T,
        throughput=dep / T,
        arrival_rate=arr / T,
        occupancy=occ / T,
        final_state=state,
        trace=trace or [],
    )
    if lat is not None:
        res.latency_mean = np.array([np.mean(d) if d else np.nan for d in lat.done])
        res.latency_se = np.array([_batch_se(np.asarray(d)) for d in lat.done])
    return res


# ---------------------------------------------------------------------------
# Episodic runs


class EpisodicLearner(Protocol):
    def begin_episode(self, k: int, history: "EpisodeHistory") -> Callable[[np.ndarray], np.ndarray]: ...

    def observe(self, pre_state, action, event: Event, sojourn: float, post_state) -> None: ...


@dataclass
class EpisodeHistory:
    costs: list[float] = field(default_factory=list)
    times: list[float] = field(default_factory=list)


class _Observer:
    def __init__(self, config, learner, episode):
        self.config, self.learner, self.episode = config, learner, episode

    def check(self, action):
        if action.shape != (self.config.n,) or action.sum() > self.config.capacity:
            raise ProtocolError(
                f"episode {self.episode}: infeasible action {np.asarray(action).astype(int).tolist()}"
            )

    def observe(self, pre, action, event, dt, post):
        self.learner.observe(pre, action, event, dt, post)


@dataclass
class EpisodicResult:
    episode_costs: np.ndarray
    episode_times: np.ndarray
    benchmark: float
    regret: np.ndarray
    cumulative_regret: np.ndarray


def episode_cost_samples(config, policy, H, rng, n=200) -> np.ndarray:
    """Cost integrals of ``n`` independent H-event episodes started at zero."""
    out = np.empty(n)
    for k in range(n):
        state = np.zeros(config.n, dtype=int)
        out[k] = _core(config, policy, H, rng, state)[1]
    return out


def benchmark_cost(config: SystemConfig, H: int, rng, n: int = 200, policy=None) -> float:
    """Expected H-event episode cost of the true-parameter index policy (Monte Carlo)."""
    policy = policy if policy is not None else IndexPolicy.from_config(config)
    return float(episode_cost_samples(config, policy, H, rng, n).mean())


def run_episodic(
    config: SystemConfig,
    learner: EpisodicLearner,
    episodes: int,
    H: int,
    rng: np.random.Generator,
    benchmark: float | None = None,
) -> EpisodicResult:
    """Reset to zero, ask the learner for a policy, run H events; repeat."""
    sched = EpisodeSchedule(H, episodes)
    if benchmark is None:
        benchmark = benchmark_cost(config, H, _child(rng))
    hist = EpisodeHistory()
    for k in range(sched.episodes):
        policy = learner.begin_episode(k, hist)
        if isinstance(policy, np.ndarray):
            policy = map_policy(policy)
        state = np.zeros(config.n, dtype=int)
        obs = _Observer(config, learner, k)
        _, cint, T, *_ = _core(config, policy, H, rng, state, observer=obs)
        hist.costs.append(cint)
        hist.times.append(T)
    costs = np.array(hist.costs)
    bench = float(benchmark)
    regret = costs - bench
    return EpisodicResult(costs, np.array(hist.times), bench, regret, np.cumsum(regret))


class FixedPolicyLearner:
    """Learner that always plays one policy (benchmarks and sanity checks)."""

    def __init__(self, policy):
        self.policy = policy

    def begin_episode(self, k, history):
        return self.policy

    def observe(self, *args):
        pass


class RandomPlacementLearner:
    """Serves K non-empty services chosen uniformly at random."""

    def __init__(self, capacity, rng):
        self.capacity, self.rng = capacity, rng

    def _act(self, state):
        busy = np.flatnonzero(state > 0)
        a = np.zeros(state.size, dtype=bool)
        if busy.size:
            a[self.rng.choice(busy, size=min(self.capacity, busy.size), replace=False)] = True
        return a

    def begin_episode(self, k, history):
        return self._act

    def observe(self, *args):
        pass


# ---------------------------------------------------------------------------
# Trace dump

TRACE_COLUMNS = ("event_index", "time", "service", "event_type", "state_after")


def write_trace(path, records: Sequence[TraceRecord]):
    """Write a trace as CSV; a ``.gz`` suffix compresses it."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.event_index, repr(float(r.time)), r.service, r.event_type,
                        " ".join(map(str, r.state_after))])


def exact_episode_cost(config: SystemConfig, action_map: np.ndarray, H: int, start=None) -> float:
    """Expected cost integral of an H-event episode under a tabulated policy.

    Propagates the jump-chain law from ``start`` (default all zeros); each visit
    contributes ``cost / total_rate``, the mean holding cost.
    """
    from scipy import sparse

    from .exact import policy_generator

    Q = policy_generator(config, action_map)
    total = -Q.diagonal()
    if np.any(total <= 0):
        raise DeadStateError("policy leaves a state with no outgoing transitions")
    J = sparse.diags(1.0 / total) @ (Q + sparse.diags(total))
    S = np.stack(np.meshgrid(*[np.arange(m) for m in config.shape], indexing="ij"), -1).reshape(-1, config.n)
    hold = (S @ (1.0 / config.lams)) / total
    p = np.zeros(config.n_states)
    p[0 if start is None else int(np.ravel_multi_index(tuple(start), config.shape))] = 1.0
    JT = J.T.tocsr()
    acc = 0.0
    for _ in range(H):
        acc += p @ hold
        p = JT @ p
    return float(acc)
