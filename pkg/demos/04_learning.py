"""Learning the index table when the rates are unknown.

Q-learning works on one service; UCB picks the most optimistic rates from a
finite candidate set and plays that candidate's index policy.
"""

import numpy as np

from edgewhittle.experiments import ucb_instance
from edgewhittle.model import ServiceParams
from edgewhittle.qlearn import relative_errors, run_epsilon_greedy_baseline, run_q_whittle
from edgewhittle.sim import make_rng
from edgewhittle.ucb import UcbConfig, candidate_grid, run_ucb_whittle
from edgewhittle.whittle import whittle_table

p = ServiceParams(10.0, 5.0, 5)
truth = whittle_table(p).values
q = run_q_whittle(p, 200, 100, rng=make_rng(0))
b = run_epsilon_greedy_baseline(p, 200, 100, rng=make_rng(0))
print("truth    :", np.round(truth, 4))
print("Q-learned:", np.round(q.table[0], 4), "rel. err", np.round(relative_errors(q.table[0], truth)[1:], 3))
print("baseline :", np.round(b.table[0], 4))

cfg = ucb_instance(5.0, 5, (10.0, 15.0))
cands = candidate_grid(cfg)
res = run_ucb_whittle(cfg, cands, UcbConfig.theoretical(100 * 100, cands.rate_lower_bound),
                      100, 100, make_rng(3))
print("UCB picks over the last 20 episodes:", res.selected[-20:].tolist(),
      "true id", cands.index_of(cfg.lams, cfg.mus))
print(f"cumulative regret after 100 episodes: {res.cumulative_regret[-1]:.3f}")
