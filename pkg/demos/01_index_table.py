"""Whittle index tables for a single service, and where they come from.

Run with ``python3 demos/01_index_table.py``.
"""

import numpy as np

from edgewhittle.exact import indifference_subsidy, stationary_dist
from edgewhittle.model import ServiceParams
from edgewhittle.whittle import raw_indices, verify_indexability, whittle_table

# A service with arrival rate 10, per-customer delivery rate 5, and room for 5
# queued requests.  Under a threshold policy the queue is a birth-death chain.
p = ServiceParams(10.0, 5.0, 5)
print("stationary law, threshold R=1:", np.round(stationary_dist(p, 1).probs, 4))

# The index of state s is the subsidy that makes thresholds s-1 and s equally good.
tab = whittle_table(p)
print("index table:", np.round(tab.values, 6), tab.provenance)

# Cross-check one entry by bisection on the subsidy with value iteration.
print("state 2 by value iteration:", round(indifference_subsidy(p, 2), 6))

# A heavily loaded service with a short buffer: the closed form is not
# monotone here, so the table falls back to the adaptive-greedy computation.
q = ServiceParams(30.0, 5.0, 5)
print("raw closed form:", np.round(raw_indices(q), 6))
print("table used     :", np.round(whittle_table(q).values, 6), whittle_table(q).provenance)

ok, _ = verify_indexability(p, np.linspace(0.0, 1.0, 50))
print("passive set grows with the subsidy:", ok)
