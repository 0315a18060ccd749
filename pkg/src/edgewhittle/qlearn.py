"""Two-timescale Q-learning of Whittle indices, and an epsilon-greedy baseline.

For a target state ``s`` two threshold policies are learned side by side:
threshold ``s`` (active for ``x >= s``) and threshold ``s+1`` (passive at
``s``).  Their Q tables are updated on the fast timescale along uniformized
single-service trajectories; the index iterate ``W(s)`` moves once per episode
toward the subsidy that makes the two tables agree at ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .model import ServiceParams


@dataclass
class QTablePair:
    """Q tables for thresholds ``s`` and ``s+1``, each of shape ``(s_max+1, 2)``."""

    target: int
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def zeros(cls, target: int, s_max: int):
        return cls(target, np.zeros((s_max + 1, 2)), np.zeros((s_max + 1, 2)))

    def written_mask(self, R: int) -> np.ndarray:
        """Entries a threshold-R run may touch: (x,0) for x<R and (x,1) for x>=R."""
        x = np.arange(self.lo.shape[0])
        return np.stack([x < R, x >= R], axis=1)


@dataclass(frozen=True)
class RateSchedules:
    """Fast step ``alpha(t)`` per transition and slow step ``gamma(k)`` per episode.

    ``kind="constant"`` keeps ``alpha0`` and ``gamma0`` fixed; ``"decaying"``
    uses ``a0 / (1 + t/tau)`` for both.
    """

    alpha0: float = 0.01
    gamma0: float = 0.005
    kind: str = "constant"
    tau_alpha: float = 1e4
    tau_gamma: float = 100.0

    def __post_init__(self):
        if self.kind not in ("constant", "decaying"):
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected constant or decaying")
        if self.alpha0 < 0 or self.gamma0 < 0:
            raise ValueError("step sizes must be non-negative")

    def alpha(self, t: int) -> float:
        if self.kind == "constant":
            return self.alpha0
        return self.alpha0 / (1.0 + t / self.tau_alpha)

    def gamma(self, k: int) -> float:
        if self.kind == "constant":
            return self.gamma0
        return self.gamma0 / (1.0 + k / self.tau_gamma)


def embedded_transition(params: ServiceParams, s: int, a: int, rng=None, u: float | None = None) -> int:
    """One step of the uniformized kernel with rate ``lam + mu*s_max``.

    Pass ``u`` to reuse a uniform draw (common random numbers).
    """
    if not 0 <= s <= params.s_max:
        raise ContractViolation(f"state {s} outside [0, {params.s_max}]")
    if u is None:
        u = rng.random()
    L1 = params.lam + params.mu * params.s_max
    up = params.lam / L1 if s < params.s_max else 0.0
    dn = params.mu * s * a / L1
    if u < up:
        return s + 1
    if u < up + dn:
        return s - 1
    return s


def q_update(Q: np.ndarray, R: int, s: int, a: int, s_next: int, C: float, W_cur: float,
             alpha: float, ref: tuple[int, int] | None = None) -> np.ndarray:
    """Threshold-R Q-learning step, in place.

    Active at ``s >= R``; passive steps pay ``C - W_cur``.  With ``ref`` the
    value at that (state, action) entry is subtracted (relative-value form).
    """
    if int(a) != int(s >= R):
        raise ContractViolation(f"action {a} at state {s} contradicts threshold {R}")
    nxt = Q[s_next, int(s_next >= R)]
    target = (C if a else C - W_cur) + nxt
    if ref is not None:
        target -= Q[ref]
    Q[s, a] = (1.0 - alpha) * Q[s, a] + alpha * target
    return Q


def whittle_iterate(W_cur: float, q_passive: float, q_active: float, gamma: float) -> float:
    """Slow-timescale step ``(1-gamma) W + gamma (q_passive - q_active)``."""
    return (1.0 - gamma) * W_cur + gamma * (q_passive - q_active)


@dataclass
class QLearnResult:
    params: tuple[ServiceParams, ...]
    table: np.ndarray  # (services, targets) final index estimates
    history: np.ndarray  # (episodes, services, targets) iterate held during each episode
    targets: np.ndarray
    pairs: list = field(default_factory=list)  # final Q tables, [service][target] -> (lo, hi)


def _check_same_smax(params: Sequence[ServiceParams]) -> int:
    sm = {p.s_max for p in params}
    if len(sm) != 1:
        raise ContractViolation("vectorized learners need a common s_max")
    return sm.pop()


def run_q_whittle(
    params: ServiceParams | Sequence[ServiceParams],
    episodes: int,
    H: int,
    schedules: RateSchedules = RateSchedules(),
    rng: np.random.Generator | None = None,
    mode: str = "relative",
    w_update: str = "indifference",
    targets: Sequence[int] | None = None,
    w0: float = 0.0,
    ref_state: int | None = None,
) -> QLearnResult:
    """Learn index values state by state with two Q tables per target.

    Each (service, target) task is independent; all are advanced together.
    Every episode resets the state to 0 and runs H uniformized transitions,
    sharing one uniform draw per step between the two tables of a task.

    ``mode``: ``"relative"`` subtracts ``Q(ref_state, 1)`` (default ``s_max``,
    always recurrent) in each target; ``"literal"`` uses the plain recursion.
    ``w_update``: ``"indifference"`` moves W by ``gamma*(Q_hi(s,0) - Q_lo(s,1))``
    so its fixed point is exact indifference; ``"literal"`` applies
    :func:`whittle_iterate` to the raw Q difference.
    """
    if isinstance(params, ServiceParams):
        params = [params]
    params = tuple(params)
    if episodes < 1 or H < 1:
        raise ContractViolation("episodes and H must be positive")
    if mode not in ("relative", "literal"):
        raise ValueError(f"unknown mode {mode!r}; expected relative or literal")
    if w_update not in ("indifference", "literal"):
        raise ValueError(f"unknown w_update {w_update!r}; expected indifference or literal")
    rng = rng if rng is not None else np.random.default_rng(0)
    smax = _check_same_smax(params)
    tg = np.arange(smax) if targets is None else np.asarray(targets, dtype=int)
    if np.any(tg < 0) or np.any(tg > smax - 1):
        raise ContractViolation(f"targets must lie in [0, {smax - 1}]")
    ref = smax if ref_state is None else int(ref_state)

    M, T = len(params), tg.size
    lam = np.array([p.lam for p in params])[:, None]
    mu = np.array([p.mu for p in params])[:, None]
    L1 = lam + mu * smax
    up_p = lam / L1
    inv_lam = 1.0 / lam

    # Q[m, t, j, x, a]: j=0 threshold s, j=1 threshold s+1
    Q = np.zeros((M, T, 2, smax + 1, 2))
    R = np.stack([tg, tg + 1], axis=-1)[None].repeat(M, axis=0)  # (M, T, 2)
    W = np.full((M, T), float(w0))
    hist = np.empty((episodes, M, T))
    mi, ti, ji = np.meshgrid(np.arange(M), np.arange(T), np.arange(2), indexing="ij")
    tcount = 0

    def slow_step(k):
        g = schedules.gamma(k)
        qp = Q[mi[..., 0], ti[..., 0], 1, tg[None, :], 0]
        qa = Q[mi[..., 0], ti[..., 0], 0, tg[None, :], 1]
        if w_update == "indifference":
            return W + g * (qp - qa)
        return whittle_iterate(W, qp, qa, g)

    for k in range(episodes):
        if k > 0:
            W = slow_step(k - 1)
        hist[k] = W
        x = np.zeros((M, T, 2), dtype=int)
        Wb = W[..., None]
        for _ in range(H):
            a = (x >= R).astype(int)
            u = rng.random((M, T))[..., None]
            up = np.where(x < smax, up_p[..., None], 0.0)
            dn = (mu[..., None] * x * a) / L1[..., None]
            y = x + (u < up) - ((u >= up) & (u < up + dn))
            c = x * inv_lam[..., None] - Wb * (1 - a)
            nxt = Q[mi, ti, ji, y, (y >= R).astype(int)]
            target = c + nxt
            if mode == "relative":
                target = target - Q[mi, ti, ji, ref, 1]
            al = schedules.alpha(tcount)
            cur = Q[mi, ti, ji, x, a]
            Q[mi, ti, ji, x, a] = (1.0 - al) * cur + al * target
            x = y
            tcount += 1
    W = slow_step(episodes - 1)
    pairs = [[(Q[m, t, 0].copy(), Q[m, t, 1].copy()) for t in range(T)] for m in range(M)]
    return QLearnResult(params, W, hist, tg, pairs)


def run_epsilon_greedy_baseline(
    params: ServiceParams | Sequence[ServiceParams],
    episodes: int,
    H: int,
    schedules: RateSchedules = RateSchedules(),
    eps_explore: float = 0.5,
    rng: np.random.Generator | None = None,
    greedy_with_prob_eps: bool = True,
    targets: Sequence[int] | None = None,
    w0: float = 0.0,
    ref_state: int = 0,
) -> QLearnResult:
    """Coupled Q-learning with epsilon-greedy exploration, one Q table per target.

    The subsidy of target ``s`` moves every transition with step ``gamma/H``
    toward indifference at ``s``.  With ``greedy_with_prob_eps`` (default)
    the learner acts greedily with probability ``eps_explore`` and at random
    otherwise; set it False for the usual ``1 - eps`` convention.
    """
    if isinstance(params, ServiceParams):
        params = [params]
    params = tuple(params)
    if not 0.0 < eps_explore <= 1.0:
        raise ContractViolation("eps_explore must lie in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    smax = _check_same_smax(params)
    tg = np.arange(smax) if targets is None else np.asarray(targets, dtype=int)
    M, T = len(params), tg.size
    lam = np.array([p.lam for p in params])[:, None]
    mu = np.array([p.mu for p in params])[:, None]
    L1 = lam + mu * smax
    up_p = lam / L1
    inv_lam = 1.0 / lam
    p_greedy = eps_explore if greedy_with_prob_eps else 1.0 - eps_explore

    Q = np.zeros((M, T, smax + 1, 2))
    W = np.full((M, T), float(w0))
    hist = np.empty((episodes, M, T))
    mi, ti = np.meshgrid(np.arange(M), np.arange(T), indexing="ij")
    tcount = 0
    for k in range(episodes):
        hist[k] = W
        x = np.zeros((M, T), dtype=int)
        g = schedules.gamma(k) / H
        a = rng.integers(0, 2, size=(M, T))
        for _ in range(H):
            u = rng.random((M, T))
            up = np.where(x < smax, up_p, 0.0)
            dn = mu * x * a / L1
            y = x + (u < up) - ((u >= up) & (u < up + dn))
            c = x * inv_lam - W * (1 - a)
            qn = Q[mi, ti, y]
            target = c + qn.min(axis=-1) - Q[mi, ti, ref_state].min(axis=-1)
            al = schedules.alpha(tcount)
            Q[mi, ti, x, a] = (1.0 - al) * Q[mi, ti, x, a] + al * target
            W = W + g * (Q[mi, ti, tg[None, :], 0] - Q[mi, ti, tg[None, :], 1])
            greedy = rng.random((M, T)) < p_greedy
            a_greedy = np.argmin(qn, axis=-1)
            a_rand = rng.integers(0, 2, size=(M, T))
            a = np.where(greedy, a_greedy, a_rand)
            x = y
            tcount += 1
    return QLearnResult(params, W, hist, tg, [])


def relative_errors(learned: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Entrywise ``|learned - truth| / |truth|``; zero-valued truths give NaN."""
    truth = np.asarray(truth, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(truth != 0, np.abs(learned - truth) / np.abs(truth), np.nan)


def episodes_to_tolerance(history: np.ndarray, truth: np.ndarray, tol: float = 0.1) -> int | None:
    """First episode after which every state stays within ``tol`` relative error.

    ``history`` has shape (episodes, states); states with zero truth are skipped.
    """
    mask = np.asarray(truth) != 0
    err = relative_errors(history[:, mask], np.asarray(truth)[mask])
    ok = np.all(err <= tol, axis=1)
    if not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    return int(bad[-1] + 1) if bad.size else 0


def group_scheduler(n: int, capacity: int) -> list[list[int]]:
    """Split service ids into consecutive groups of at most ``capacity``."""
    if n < 1 or capacity < 1:
        raise ContractViolation("n and capacity must be positive")
    return [list(range(i, min(i + capacity, n))) for i in range(0, n, capacity)]
