"""Exact analytics: threshold policies, the relaxed problem, and small-system DP.

Threshold convention: under threshold ``R`` a service is passive for
``s <= R`` and active for ``s > R``.  ``R = -1`` means always active.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve
from scipy.special import gammaln

from .errors import ContractViolation, ConvergenceError, ReducibleChainError, ResourceBudgetError
from .model import ServiceParams, SystemConfig

DEFAULT_BUDGET = 10**7


@dataclass(frozen=True)
class StationaryDist:
    """Stationary law of one service under a threshold policy.

    ``probs`` covers the full grid ``0..s_max``; states below ``R`` carry zero mass.
    """

    R: int
    probs: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.arange(max(self.R, 0), self.probs.size)


@dataclass
class DpSolution:
    f: float
    V: np.ndarray
    action: np.ndarray  # bool, shape grid + (N,)
    iterations: int
    span: float
    advantage: np.ndarray | None = None  # per-service activation gain, shape grid + (N,)


def _check_R(params: ServiceParams, R: int, allow_always_active=True):
    lo = -1 if allow_always_active else 0
    if int(R) != R or not lo <= R <= params.s_max - 1:
        raise ContractViolation(f"threshold {R} outside [{lo}, {params.s_max - 1}]")
    return int(R)


def stationary_dist(params: ServiceParams, R: int) -> StationaryDist:
    """Product-form law ``q(R+l) ~ rho^l / prod_{k<=l}(R+k)``, renormalized on the grid."""
    R = _check_R(params, R)
    base = max(R, 0)  # always-active has the same law as R=0 (no departures from 0)
    l = np.arange(params.s_max - base + 1)
    logw = l * np.log(params.rho) - (gammaln(base + l + 1) - gammaln(base + 1))
    w = np.exp(logw - logw.max())
    probs = np.zeros(params.s_max + 1)
    probs[base:] = w / w.sum()
    return StationaryDist(R, probs)


def threshold_generator(params: ServiceParams, R: int) -> np.ndarray:
    """Dense generator of the single-service chain under threshold ``R``."""
    R = _check_R(params, R)
    n = params.s_max + 1
    s = np.arange(n)
    Q = np.zeros((n, n))
    Q[s[:-1], s[:-1] + 1] = params.lam
    act = s > R
    Q[s[1:], s[1:] - 1] = params.mu * s[1:] * act[1:]
    Q[s, s] = -Q.sum(axis=1)
    return Q


def stationary_dist_linear(params: ServiceParams, R: int) -> np.ndarray:
    """Balance-equation oracle: solve ``pi Q = 0`` on the recurrent class directly."""
    Q = threshold_generator(params, R)
    base = max(int(R), 0)
    sub = Q[base:, base:]
    A = sub.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(A.shape[0])
    b[-1] = 1.0
    pi = np.zeros(params.s_max + 1)
    pi[base:] = np.linalg.solve(A, b)
    return pi


@lru_cache(maxsize=4096)
def threshold_curves(params: ServiceParams) -> tuple[np.ndarray, np.ndarray]:
    """Expected cost E(R) and passive mass P(R) for R = -1..s_max-1.

    Index ``j`` of each array holds threshold ``R = j - 1``.
    """
    s = np.arange(params.s_max + 1)
    E = np.empty(params.s_max + 1)
    P = np.empty(params.s_max + 1)
    for R in range(-1, params.s_max):
        q = stationary_dist(params, R).probs
        E[R + 1] = float(q @ s) / params.lam
        P[R + 1] = q[R] if R >= 0 else 0.0
    E.flags.writeable = False
    P.flags.writeable = False
    return E, P


def expected_cost(params: ServiceParams, R: int) -> float:
    R = _check_R(params, R)
    return float(threshold_curves(params)[0][R + 1])


def passive_mass(params: ServiceParams, R: int) -> float:
    R = _check_R(params, R)
    return float(threshold_curves(params)[1][R + 1])


def threshold_avg_cost(params: ServiceParams, R: int, W: float) -> float:
    """Subsidized average cost ``E(R) - W * P(R)``."""
    if W < 0:
        raise ContractViolation("subsidy must be non-negative")
    return expected_cost(params, R) - W * passive_mass(params, R)


def best_threshold(params: ServiceParams, W: float) -> int:
    """Minimizer of the subsidized cost over R = 0..s_max-1, ties toward smaller R."""
    if W < 0:
        raise ContractViolation("subsidy must be non-negative")
    E, P = threshold_curves(params)
    h = E[1:] - W * P[1:]
    return int(np.argmin(h))


# ---------------------------------------------------------------------------
# Relaxed (Lagrangian) problem


@dataclass(frozen=True)
class RelaxedSolution:
    value: float  # dual value: optimum of the time-average relaxed problem
    subsidy: float
    thresholds: tuple[int, ...]
    active_count: float
    primal_cost: float  # sum of expected costs at the chosen (left-limit) thresholds
    bracketed: bool


def _as_services(config, theta) -> tuple[tuple[ServiceParams, ...], int]:
    if theta is None:
        return config.services, config.capacity
    svc = []
    for p, th in zip(config.services, theta):
        if isinstance(th, ServiceParams):
            svc.append(th)
        else:
            lam, mu = th
            svc.append(ServiceParams(lam, mu, p.s_max))
    if len(svc) != config.n:
        raise ContractViolation("theta must give one (lam, mu) pair per service")
    return tuple(svc), config.capacity


def relaxed_value(config: SystemConfig, theta=None, tol: float = 1e-6) -> RelaxedSolution:
    """Solve the time-average relaxation by bisection on the subsidy.

    ``theta`` optionally replaces each service's ``(lam, mu)``.  The returned
    ``value`` is the dual optimum ``sum_i min_R h_i^R(W*) + W*(N-K)``, which
    equals the relaxed optimum (mixing the two thresholds at W*).
    """
    services, K = _as_services(config, theta)
    curves = [threshold_curves(p) for p in services]
    N = len(services)

    def inner(W):
        Rs, Es, Ps, hs = [], [], [], []
        for E, P in curves:
            h = E[1:] - W * P[1:]
            j = int(np.argmin(h))
            Rs.append(j)
            Es.append(E[j + 1])
            Ps.append(P[j + 1])
            hs.append(h[j])
        return Rs, np.array(Es), np.array(Ps), float(np.sum(hs))

    def pack(W, bracketed):
        Rs, Es, Ps, hsum = inner(W)
        return RelaxedSolution(
            value=hsum + W * (N - K),
            subsidy=W,
            thresholds=tuple(Rs),
            active_count=float(N - Ps.sum()),
            primal_cost=float(Es.sum()),
            bracketed=bracketed,
        )

    if K >= N or N - inner(0.0)[2].sum() <= K:
        return pack(0.0, True)
    hi = max(p.s_max / p.lam for p in services)
    if N - inner(hi)[2].sum() > K:
        return pack(hi, False)
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if N - inner(mid)[2].sum() <= K:
            hi = mid
        else:
            lo = mid
    # lo is the left limit of the crossing; the dual is continuous so either end is fine
    return pack(lo, True)


# ---------------------------------------------------------------------------
# Coupled DP on the truncated joint grid


def _shift(V, axis, direction):
    """V evaluated at s + direction*e_axis, clamped at the grid edge."""
    n = V.shape[axis]
    if direction > 0:
        idx = np.minimum(np.arange(n) + 1, n - 1)
    else:
        idx = np.maximum(np.arange(n) - 1, 0)
    return np.take(V, idx, axis=axis)


def _grid_axes(config: SystemConfig):
    return np.meshgrid(*[np.arange(m) for m in config.shape], indexing="ij")


def value_iteration(
    config: SystemConfig,
    subsidy: float = 0.0,
    tol: float = 1e-9,
    max_iter: int = 200_000,
    budget: int = DEFAULT_BUDGET,
    V0: np.ndarray | None = None,
) -> DpSolution:
    """Relative value iteration on the uniformized joint chain.

    ``subsidy`` pays W per unit time to every passive service (used for the
    single-service indifference oracle).  At each state the K services with the
    most negative activation gain are served; ties go to the smaller id.
    """
    n_states = config.n_states
    if n_states > budget:
        raise ResourceBudgetError(f"{n_states} states exceed the budget of {budget}")
    cap = budget // n_states
    limit = min(max_iter, cap)

    S = _grid_axes(config)
    lams, mus = config.lams, config.mus
    Lam = float(lams.sum() + (mus * config.s_maxes).sum())
    N, K = config.n, config.capacity
    c = sum(S[i] / lams[i] for i in range(N)) - subsidy * N
    birth = [np.where(S[i] < config.s_maxes[i], lams[i], 0.0) for i in range(N)]
    death = [mus[i] * S[i] for i in range(N)]

    V = np.zeros(config.shape) if V0 is None else np.array(V0, dtype=float)
    span = np.inf
    it = 0
    for it in range(1, limit + 1):
        base = c + sum(birth[i] * (_shift(V, i, +1) - V) for i in range(N))
        gains = np.stack([death[i] * (_shift(V, i, -1) - V) + subsidy for i in range(N)], axis=-1)
        if K >= N:
            best = np.minimum(gains, 0.0).sum(axis=-1)
        elif K == 1:
            best = np.minimum(gains.min(axis=-1), 0.0)
        else:
            best = np.minimum(np.sort(gains, axis=-1)[..., :K], 0.0).sum(axis=-1)
        Vn = V + (base + best) / Lam
        diff = Vn - V
        span = float(diff.max() - diff.min())
        V = Vn - Vn.flat[0]
        if span < tol:
            break
    else:
        if cap <= max_iter:
            raise ResourceBudgetError(
                f"value iteration needs more than {n_states}*{cap} state-iterations"
            )
        raise ConvergenceError(f"no convergence in {limit} iterations", span=span)

    f = 0.5 * (diff.max() + diff.min()) * Lam
    action = _topk_negative(gains, K)
    return DpSolution(float(f), V, action, it, span, advantage=gains)


def _topk_negative(gains: np.ndarray, K: int) -> np.ndarray:
    """Activate up to K entries with the most negative gain; ties to the lower id."""
    g = np.round(gains, 10)
    order = np.argsort(g, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(g.shape[-1]), g.shape), axis=-1)
    return (ranks < K) & (g < 0)


def parking_margin(params: ServiceParams, W: float) -> float:
    """Gain of idling forever at s_max minus the best threshold gain at subsidy ``W``.

    Positive means the single-service MDP is unichain at ``W``; once it turns
    negative the optimal gain depends on the start state and the
    indifference point of the truncated chain is not well defined.
    """
    E, P = threshold_curves(params)
    return float((params.s_max / params.lam - W) - np.min(E - W * P))


def indifference_subsidy(params: ServiceParams, s: int, tol: float = 1e-9,
                         hint: float | None = None) -> float:
    """Subsidy at which state ``s`` is indifferent between serving and idling.

    Bisection on the sign of the activation gain from relative value
    iteration on the single-service MDP; an oracle for index tables that is
    independent of the ratio formula.  Only meaningful while
    ``parking_margin`` is positive.  ``hint`` only seeds the bracket; its end
    signs are checked by the DP itself and widened until they differ.
    """
    if not 0 <= s <= params.s_max - 1:
        raise ContractViolation(f"state {s} outside [0, {params.s_max - 1}]")
    cfg = SystemConfig((params,), 1)
    if s == 0:
        return 0.0
    warm = [None]

    def gain(W):
        sol = value_iteration(cfg, subsidy=W, tol=1e-10 * max(1.0, W), max_iter=10**6,
                              budget=10**9, V0=warm[0])
        warm[0] = sol.V
        return sol.advantage[s, 0]

    if hint is not None and hint > 0:
        lo, hi = 0.99 * hint, 1.01 * hint
        while lo > 0 and gain(lo) >= 0:
            lo = lo * 0.9 if lo > 1e-12 else 0.0
    else:
        lo, hi = 0.0, params.s_max / params.lam
    while gain(hi) < 0:
        hi *= 2
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gain(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def tabulate_policy(config: SystemConfig, policy: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Evaluate a state -> action callable over the joint grid."""
    out = np.zeros(config.shape + (config.n,), dtype=bool)
    for idx in np.ndindex(*config.shape):
        out[idx] = policy(np.array(idx))
    return out


def policy_generator(config: SystemConfig, action: np.ndarray) -> sparse.csr_matrix:
    if action.shape != config.shape + (config.n,):
        raise ContractViolation(f"action map must have shape {config.shape + (config.n,)}")
    if np.any(action.sum(axis=-1) > config.capacity):
        raise ContractViolation("action map violates the capacity constraint")
    shape = config.shape
    n = config.n_states
    S = _grid_axes(config)
    flat = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    for i, p in enumerate(config.services):
        up = S[i] < p.s_max
        rows.append(flat[up])
        cols.append(_shift(flat, i, +1)[up])
        vals.append(np.full(up.sum(), p.lam))
        dn = (S[i] > 0) & action[..., i]
        rows.append(flat[dn])
        cols.append(_shift(flat, i, -1)[dn])
        vals.append(p.mu * S[i][dn])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals).astype(float)
    Q = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Q = Q - sparse.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Q.tocsr()


def closed_classes(Q: sparse.csr_matrix) -> list[np.ndarray]:
    """Closed communicating classes of a generator, as arrays of flat indices."""
    A = Q.copy()
    A.setdiag(0)
    A.eliminate_zeros()
    ncomp, labels = csgraph.connected_components(A, directed=True, connection="strong")
    coo = A.tocoo()
    leaves = np.ones(ncomp, dtype=bool)
    cross = labels[coo.row] != labels[coo.col]
    leaves[np.unique(labels[coo.row[cross]])] = False
    return [np.flatnonzero(labels == c) for c in np.flatnonzero(leaves)]


def policy_stationary(config: SystemConfig, action: np.ndarray, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Stationary distribution over the joint grid under a fixed action map."""
    if config.n_states > budget:
        raise ResourceBudgetError(f"{config.n_states} states exceed the budget of {budget}")
    Q = policy_generator(config, action)
    classes = closed_classes(Q)
    if len(classes) > 1:
        shape = config.shape
        named = [[tuple(int(v) for v in np.unravel_index(c[0], shape))] for c in classes]
        raise ReducibleChainError(
            f"policy induces {len(classes)} closed classes (first states: {named})",
            classes=tuple(classes),
        )
    A = Q.T.tolil()
    A[0, :] = np.ones(config.n_states)
    b = np.zeros(config.n_states)
    b[0] = 1.0
    pi = spsolve(A.tocsr(), b)
    pi = np.clip(pi, 0.0, None)
    return (pi / pi.sum()).reshape(config.shape)


def exact_policy_cost(config: SystemConfig, policy, budget: int = DEFAULT_BUDGET) -> float:
    """Long-run average cost of a stationary policy via the policy-induced CTMC."""
    action = policy if isinstance(policy, np.ndarray) else tabulate_policy(config, policy)
    pi = policy_stationary(config, action, budget=budget)
    S = _grid_axes(config)
    c = sum(S[i] / config.lams[i] for i in range(config.n))
    return float((pi * c).sum())


def threshold_action_map(config: SystemConfig, thresholds: Sequence[int]) -> np.ndarray:
    """Action map serving every service whose queue exceeds its threshold (capacity ignored)."""
    S = _grid_axes(config)
    return np.stack([S[i] > thresholds[i] for i in range(config.n)], axis=-1)
