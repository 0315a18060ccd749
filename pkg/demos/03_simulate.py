"""Event-driven simulation of the placement policy.

Compares simulated occupancy with the exact stationary law, then runs the
index policy on three services sharing one slot.
"""

import numpy as np

from edgewhittle.exact import stationary_dist, threshold_action_map
from edgewhittle.model import ServiceParams, SystemConfig
from edgewhittle.sim import IndexPolicy, make_rng, run_policy
from edgewhittle.whittle import tables_for

p = ServiceParams(5.0, 5.0, 30)
one = SystemConfig((p,), 1)
res = run_policy(one, threshold_action_map(one, [2]), 200_000, make_rng(1), track_latency=True)
tv = 0.5 * np.abs(res.occupancy[0] - stationary_dist(p, 2).probs).sum()
print(f"total variation to the exact law: {tv:.4f}")
print(f"mean latency {res.latency_mean[0]:.4f}, Little's law {res.mean_queue[0] / res.arrival_rate[0]:.4f}")

cfg = SystemConfig.from_rates([4.0, 8.0, 12.0], [5.0] * 3, 10, 1)
pol = IndexPolicy(tables_for(cfg), cfg.capacity)
sim = run_policy(cfg, pol, 100_000, make_rng(2))
print(f"index policy cost {sim.avg_cost:.4f}; mean queues {np.round(sim.mean_queue, 3)}")
