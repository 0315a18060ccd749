"""How close is the index policy to the optimum on two identical services?

Solves the joint MDP by value iteration and evaluates the index policy
exactly on the same chain.  Takes about ten seconds.
"""

from edgewhittle.experiments import TABLE1_REFERENCE, run_switching_curve, run_table1

rows = run_table1(ratios=range(1, 8), mu=5.0, s_max=30, sweep=())
print(" ratio   optimum   index   gap %   reference %")
for r in rows:
    print(f"{r.ratio:6.0f} {r.f_opt:9.5f} {r.whittle_cost:7.5f} {r.gap_pct:7.3f}"
          f"   {TABLE1_REFERENCE[int(r.ratio)]:.3f}")

# Two different services: where does the optimal policy switch service?
sc = run_switching_curve(lam1=20.0, lam2=30.0, mu=5.0, s_max=20)
print(f"index rule matches the optimal action in {100 * sc.agreement:.1f}% of states")
