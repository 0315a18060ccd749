"""Whittle index tables and the top-K index rule.

The table entry for state ``s`` is the subsidy at which the passive set grows
from ``{0..s-1}`` to ``{0..s}``, i.e. the comparison ratio between thresholds
``s-1`` and ``s``.  State 0 compares the always-active policy with threshold 0,
which gives 0 because departures never happen from an empty queue.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, DegenerateDenominatorError
from .exact import best_threshold, threshold_curves
from .model import ServiceParams, SystemConfig

DENOM_FLOOR = 1e-14
CLOSED_FORM = "closed-form"
FALLBACK = "fallback"


@dataclass(frozen=True)
class WhittleTable:
    """Index values ``W(s)`` for ``s = 0..s_max-1`` of one service.

    Lookups beyond ``s_max - 1`` clamp to the last entry.
    """

    params: ServiceParams
    values: np.ndarray
    monotone_closed_form: bool
    provenance: tuple[str, ...]

    def __call__(self, s):
        return self.values[np.minimum(s, self.values.size - 1)]


def _ratio(E, P, r0, r1):
    den = P[r1 + 1] - P[r0 + 1]
    if den <= DENOM_FLOOR:
        raise DegenerateDenominatorError(
            f"passive-mass difference {den:.3g} between thresholds {r0} and {r1}"
        )
    return (E[r1 + 1] - E[r0 + 1]) / den


def whittle_index_raw(params: ServiceParams, R: int) -> float:
    """Closed-form ratio between thresholds ``R`` and ``R+1``."""
    if int(R) != R or not 0 <= R <= params.s_max - 2:
        raise ContractViolation(f"threshold {R} outside [0, {params.s_max - 2}]")
    E, P = threshold_curves(params)
    return float(_ratio(E, P, int(R), int(R) + 1))


def raw_indices(params: ServiceParams) -> np.ndarray:
    """All closed-form ratios for R = 0..s_max-2."""
    E, P = threshold_curves(params)
    den = np.diff(P[1:])
    if np.any(den <= DENOM_FLOOR):
        R = int(np.argmax(den <= DENOM_FLOOR))
        raise DegenerateDenominatorError(f"passive-mass difference {den[R]:.3g} at threshold {R}")
    return np.diff(E[1:]) / den


def _adaptive_greedy(params: ServiceParams) -> tuple[np.ndarray, list[str]]:
    E, P = threshold_curves(params)
    top = params.s_max - 1
    values = np.empty(params.s_max)
    prov: list[str] = []
    Rj = -1
    while Rj < top:
        cand = np.arange(Rj + 1, top + 1)
        den = P[cand + 1] - P[Rj + 1]
        if np.any(den <= DENOM_FLOOR):
            raise DegenerateDenominatorError(f"passive-mass difference below floor after threshold {Rj}")
        ratios = (E[cand + 1] - E[Rj + 1]) / den
        k = int(np.argmin(ratios))
        nxt = int(cand[k])
        values[Rj + 1 : nxt + 1] = ratios[k]
        prov.extend([CLOSED_FORM if nxt == Rj + 1 else FALLBACK] * (nxt - Rj))
        Rj = nxt
    return values, prov


def whittle_table(params: ServiceParams) -> WhittleTable:
    """Index table from the closed form, or adaptive greedy when that is non-monotone."""
    raw = raw_indices(params)
    monotone = bool(np.all(np.diff(raw) >= 0))
    if monotone:
        values = np.concatenate([[0.0], raw])
        prov = [CLOSED_FORM] * params.s_max
    else:
        values, prov = _adaptive_greedy(params)
    if not np.all(np.isfinite(values)) or np.any(np.diff(values) < -1e-12):
        raise AssertionError("index table must be finite and non-decreasing")
    values = np.maximum.accumulate(values)
    values.flags.writeable = False
    return WhittleTable(params, values, monotone, tuple(prov))


def fallback_table(params: ServiceParams) -> np.ndarray:
    """Adaptive-greedy table regardless of monotonicity (for cross-checks)."""
    return _adaptive_greedy(params)[0]


def verify_indexability(params: ServiceParams, w_grid: Sequence[float]):
    """Check that the optimal threshold is non-decreasing along a sorted subsidy grid.

    Returns ``(True, None)`` or ``(False, ((W_a, R_a), (W_b, R_b)))``.
    """
    w = np.asarray(w_grid, dtype=float)
    if np.any(np.diff(w) < 0):
        raise ContractViolation("subsidy grid must be sorted ascending")
    Rs = [best_threshold(params, W) for W in w]
    for j in range(1, len(Rs)):
        if Rs[j] < Rs[j - 1]:
            return False, ((float(w[j - 1]), Rs[j - 1]), (float(w[j]), Rs[j]))
    return True, None


def index_rule_action(tables: Sequence[WhittleTable], state, K: int) -> np.ndarray:
    """Serve the K non-empty services with the largest index; ties to the smaller id."""
    state = np.asarray(state)
    if len(tables) != state.size:
        raise ContractViolation("need one table per service")
    idx = np.array([t(int(s)) for t, s in zip(tables, state)])
    order = np.lexsort((np.arange(state.size), -idx))
    action = np.zeros(state.size, dtype=bool)
    chosen = [i for i in order if state[i] > 0][:K]
    action[chosen] = True
    return action


def index_policy_map(config: SystemConfig, tables: Sequence[WhittleTable]) -> np.ndarray:
    """Vectorized index rule over the whole joint grid, shape grid + (N,)."""
    S = np.meshgrid(*[np.arange(m) for m in config.shape], indexing="ij")
    N, K = config.n, config.capacity
    idx = np.stack([tables[i](S[i]) for i in range(N)], axis=-1)
    busy = np.stack([S[i] > 0 for i in range(N)], axis=-1)
    key = np.where(busy, idx, -np.inf)
    # stable sort on -key keeps the lower id first among ties
    order = np.argsort(-key, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(N), order.shape), axis=-1)
    return (ranks < K) & busy


def tables_for(config: SystemConfig) -> list[WhittleTable]:
    return [whittle_table(p) for p in config.services]
