"""Controlled birth-death model of N services sharing one edge server.

Each service ``i`` holds a queue of waiting customers.  Requests arrive as a
Poisson stream of rate ``lam``; while the service is placed at the edge every
waiting customer is served in parallel at rate ``mu`` so the queue empties at
rate ``mu * s``.  Queues are truncated at ``s_max`` (arrivals at a full queue
are dropped), which keeps every chain finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class ServiceParams:
    lam: float
    mu: float
    s_max: int

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"arrival rate must be positive, got {self.lam}")
        if not self.mu > 0:
            raise ValueError(f"delivery rate must be positive, got {self.mu}")
        if int(self.s_max) != self.s_max or self.s_max < 2:
            raise ValueError(f"s_max must be an integer >= 2, got {self.s_max}")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "s_max", int(self.s_max))

    @property
    def rho(self) -> float:
        return self.lam / self.mu


@dataclass(frozen=True)
class SystemConfig:
    """N services and an edge capacity of K simultaneously placed services.

    ``K >= N`` is accepted (the capacity constraint is then slack); the
    interesting regime is ``1 <= K < N``.
    """

    services: tuple[ServiceParams, ...]
    capacity: int

    def __post_init__(self):
        object.__setattr__(self, "services", tuple(self.services))
        if len(self.services) == 0:
            raise ValueError("at least one service is required")
        if int(self.capacity) != self.capacity or self.capacity < 1:
            raise ValueError(f"capacity must be a positive integer, got {self.capacity}")
        object.__setattr__(self, "capacity", int(self.capacity))

    @property
    def n(self) -> int:
        return len(self.services)

    @property
    def lams(self) -> np.ndarray:
        return np.array([p.lam for p in self.services])

    @property
    def mus(self) -> np.ndarray:
        return np.array([p.mu for p in self.services])

    @property
    def s_maxes(self) -> np.ndarray:
        return np.array([p.s_max for p in self.services], dtype=int)

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the truncated joint state grid."""
        return tuple(int(p.s_max) + 1 for p in self.services)

    @property
    def n_states(self) -> int:
        return math.prod(self.shape)

    @classmethod
    def homogeneous(cls, n, capacity, lam, mu, s_max):
        return cls(tuple(ServiceParams(lam, mu, s_max) for _ in range(n)), capacity)

    @classmethod
    def from_rates(cls, lams: Sequence[float], mus: Sequence[float], s_max, capacity):
        if np.isscalar(s_max):
            s_max = [s_max] * len(lams)
        return cls(tuple(ServiceParams(l, m, s) for l, m, s in zip(lams, mus, s_max)), capacity)


def cost(params: ServiceParams, s):
    """Latency cost rate ``s / lam`` of holding ``s`` waiting customers.

    The cost does not depend on the placement decision.  ``s`` may be an array.
    """
    if np.any(np.asarray(s) < 0):
        raise ContractViolation("queue length must be non-negative")
    return s / params.lam


def rates(params: ServiceParams, s: int, a: bool) -> tuple[float, float]:
    """Birth (arrival) and death (delivery) rates in state ``s`` under action ``a``."""
    if not 0 <= s <= params.s_max:
        raise ContractViolation(f"queue length {s} outside [0, {params.s_max}]")
    birth = params.lam if s < params.s_max else 0.0
    death = params.mu * s if a else 0.0
    return birth, death


def check_state(config: SystemConfig, state) -> np.ndarray:
    state = np.asarray(state)
    if state.shape != (config.n,):
        raise ContractViolation(f"state must have length {config.n}, got shape {state.shape}")
    if np.any(state < 0) or np.any(state > config.s_maxes):
        raise ContractViolation(f"state {state.tolist()} outside the truncated grid")
    return state.astype(int)


def check_action(config: SystemConfig, action) -> np.ndarray:
    action = np.asarray(action, dtype=bool)
    if action.shape != (config.n,):
        raise ContractViolation(f"action must have length {config.n}, got shape {action.shape}")
    if action.sum() > config.capacity:
        raise ContractViolation(
            f"action activates {int(action.sum())} services, capacity is {config.capacity}"
        )
    return action


def total_cost(config: SystemConfig, state) -> float:
    return float(np.sum(np.asarray(state) / config.lams))
