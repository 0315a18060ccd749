"""Command-line runner: ``edgewhittle <subcommand> [--config FILE] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 resource budget exceeded,
4 any other runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import EdgeWhittleError, ResourceBudgetError, ScenarioError
from .exact import threshold_action_map, value_iteration
from .experiments import (
    TABLE1_REFERENCE,
    count_inversions,
    run_convergence,
    run_mse_vs_n,
    run_switching_curve,
    run_table1,
)
from .model import SystemConfig
from .qlearn import RateSchedules, run_epsilon_greedy_baseline, run_q_whittle
from .scenario import ResultBundle, Scenario, build_scenario, emit_results, parse_scenario
from .sim import IndexPolicy, make_rng, run_policy, write_trace
from .ucb import UcbConfig, candidate_grid, run_ucb_whittle
from .whittle import tables_for

log = logging.getLogger("edgewhittle")

SUBCOMMANDS = ("whittle-table", "optimal", "simulate", "learn-ucb", "learn-q", "baseline",
               "table1", "switching-curve", "convergence", "mse-vs-n")


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": None, "threads": 1, "format": "csv",
                   "verbose": False}


def _global_flags() -> argparse.ArgumentParser:
    # defaults are suppressed so a flag given before the subcommand is not
    # overwritten by the subcommand's copy; main() fills them in afterwards
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=S, help="scenario YAML file")
    p.add_argument("--seed", type=int, default=S, help="overrides the scenario seed")
    p.add_argument("--out", type=Path, default=S,
                   help="output directory (default: scenario output or ./out)")
    p.add_argument("--threads", type=int, default=S, help="worker threads for replications")
    p.add_argument("--format", choices=("csv", "json"), default=S, help="table format (csv)")
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = argparse.ArgumentParser(prog="edgewhittle", parents=[g], description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[g])
        if name in ("whittle-table", "optimal", "simulate", "learn-ucb", "learn-q", "baseline"):
            sp.add_argument("--lam", type=float, nargs="+", help="arrival rates (instead of --config)")
            sp.add_argument("--mu", type=float, nargs="+", help="delivery rates (one or per service)")
            sp.add_argument("--s-max", type=int, default=None)
            sp.add_argument("--capacity", type=int, default=None)
        if name in ("simulate",):
            sp.add_argument("--events", type=int)
            sp.add_argument("--policy", choices=("whittle", "optimal", "threshold"))
            sp.add_argument("--trace", type=Path)
        if name in ("learn-ucb", "learn-q", "baseline", "convergence", "mse-vs-n"):
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--horizon", type=int)
    return parser


def _scenario(args, kind: str) -> Scenario:
    if args.config is not None:
        sc = parse_scenario(args.config)
        if kind in ("table1", "switching-curve", "convergence", "mse-vs-n") \
                and sc.experiment not in (kind, "custom"):
            raise ScenarioError(f"scenario is for {sc.experiment!r}, not {kind!r}", field="experiment")
        return sc
    raw: dict = {"seed": 0, "experiment": kind if kind in ("table1", "switching-curve", "convergence",
                                                            "mse-vs-n") else "custom"}
    lam = getattr(args, "lam", None)
    if lam:
        mu = args.mu or [5.0]
        if len(mu) == 1:
            mu = mu * len(lam)
        if len(mu) != len(lam):
            raise ScenarioError("give one --mu or one per --lam", field="mu")
        system = {"capacity": args.capacity or max(1, len(lam) // 2),
                  "services": [{"lam": l, "mu": m} for l, m in zip(lam, mu)]}
        if args.s_max is not None:
            system["s_max"] = args.s_max
        raw["system"] = system
    elif raw["experiment"] == "custom":
        raise ScenarioError("pass --config or --lam/--mu", field="system")
    return build_scenario(raw)


def _apply_overrides(args, sc: Scenario):
    if getattr(args, "lam", None) and args.config is not None:
        raise ScenarioError("--lam cannot be combined with --config", field="lam")
    for key in ("s_max", "capacity"):
        if getattr(args, key, None) is not None and args.config is not None:
            raise ScenarioError(f"--{key.replace('_', '-')} cannot be combined with --config", field=key)
    if getattr(args, "episodes", None):
        sc.learning["episodes"] = args.episodes
    if getattr(args, "horizon", None):
        sc.learning["horizon"] = args.horizon
    if getattr(args, "events", None):
        sc.simulate["events"] = args.events
    if getattr(args, "policy", None):
        sc.simulate["policy"] = args.policy
    if getattr(args, "trace", None):
        sc.simulate["trace"] = str(args.trace)


def _need_system(sc: Scenario) -> SystemConfig:
    if sc.system is None:
        raise ScenarioError("this command needs a system section", field="system")
    return sc.system


def _state_cols(n):
    return [f"s{i}" for i in range(n)]


# ---------------------------------------------------------------------------


def cmd_whittle_table(sc, seed, threads):
    config = _need_system(sc)
    b = ResultBundle("whittle_table")
    rows, flags = [], []
    for i, t in enumerate(tables_for(config)):
        flags.append(t.monotone_closed_form)
        rows += [[i, s, float(v), t.provenance[s]] for s, v in enumerate(t.values)]
    b.add_table("table", ["service_id", "state", "index", "provenance"], rows)
    b.summary = {"monotone_closed_form": flags}
    return b


def cmd_optimal(sc, seed, threads):
    config = _need_system(sc)
    sol = value_iteration(config, **sc.params)
    b = ResultBundle("optimal")
    rows = []
    for idx in np.ndindex(*config.shape):
        rows.append(list(idx) + [int(a) for a in sol.action[idx]] + [float(sol.V[idx])])
    b.add_table("policy", _state_cols(config.n) + [f"a{i}" for i in range(config.n)] + ["V"], rows)
    b.summary = {"f": sol.f, "iterations": sol.iterations, "span": sol.span}
    return b


def cmd_simulate(sc, seed, threads):
    config = _need_system(sc)
    sim = sc.simulate
    pol_name = sim["policy"]
    if pol_name == "whittle":
        policy = IndexPolicy.from_config(config)
    elif pol_name == "optimal":
        policy = value_iteration(config).action
    else:
        th = sim["thresholds"]
        if th is None or len(th) != config.n:
            raise ScenarioError("threshold policy needs one threshold per service",
                                field="simulate.thresholds")
        if config.capacity < config.n:
            raise ScenarioError("threshold policy ignores capacity; set capacity >= N",
                                field="system.capacity")
        policy = threshold_action_map(config, th)
    res = run_policy(config, policy, int(sim["events"]), make_rng(seed, 0),
                     keep_trace=bool(sim["trace"]))
    if sim["trace"]:
        write_trace(sim["trace"], res.trace)
    b = ResultBundle("simulate")
    b.add_table("services", ["service_id", "mean_queue", "throughput", "arrival_rate", "latency"],
                [[i, res.mean_queue[i], res.throughput[i], res.arrival_rate[i],
                  res.mean_queue[i] / res.arrival_rate[i] if res.arrival_rate[i] > 0 else None]
                 for i in range(config.n)])
    b.summary = {"avg_cost": res.avg_cost, "total_time": res.total_time, "events": res.events,
                 "policy": pol_name}
    return b


def _ucb_cfg(sc, T, cands):
    u = sc.ucb
    cfg = UcbConfig.theoretical(T, cands.rate_lower_bound, eps=u["eps"], delta=u["delta"], b=u["b"])
    if u["K1"] is not None:
        cfg = UcbConfig(cfg.delta, cfg.b, cfg.eps, cfg.tau_h, cfg.T, float(u["K1"]))
    return cfg


def cmd_learn_ucb(sc, seed, threads):
    config = _need_system(sc)
    K, H = sc.learning["episodes"], sc.learning["horizon"]
    cands = candidate_grid(config, sc.ucb["classes"], sc.ucb["lam_factors"], sc.ucb["mu_factors"])
    cfg = _ucb_cfg(sc, K * H, cands)
    res = run_ucb_whittle(config, cands, cfg, K, H, make_rng(seed, 0))
    b = ResultBundle("learn_ucb")
    b.add_table("episodes", ["episode", "selected_candidate_id", "episode_cost", "cumulative_regret"],
                [[k, int(res.selected[k]), res.episode_costs[k], res.cumulative_regret[k]]
                 for k in range(K)])
    crow = []
    for c in range(len(cands)):
        for i, (l, m) in enumerate(cands.rates(c)):
            crow.append([c, i, l, m])
    b.add_table("candidates", ["candidate_id", "service_id", "lam", "mu"], crow)
    true_id = cands.index_of(config.lams, config.mus)
    b.summary = {"true_candidate_id": true_id, "benchmark_episode_cost": res.benchmark,
                 "K1": cfg.K1, "tau_h": cfg.tau_h, "delta": cfg.delta, "eps": cfg.eps, "b": cfg.b,
                 "final_selected": int(res.selected[-1])}
    return b


def _learn_bundle(name, config, res, label):
    b = ResultBundle(name)
    rows = []
    for i in range(config.n):
        for j, s in enumerate(res.targets):
            for k in range(res.history.shape[0]):
                rows.append([i, int(s), k, res.history[k, i, j]])
    b.add_table("trace", ["service_id", "target_state", "episode", "W_iterate"], rows)
    b.add_table("table", ["service_id", "state", "index", "provenance"],
                [[i, int(s), res.table[i, j], label] for i in range(config.n)
                 for j, s in enumerate(res.targets)])
    return b


def _groups_by_smax(config):
    out = {}
    for i, p in enumerate(config.services):
        out.setdefault(p.s_max, []).append(i)
    return out


def _learn(sc, seed, fn, name, label):
    config = _need_system(sc)
    K, H = sc.learning["episodes"], sc.learning["horizon"]
    groups = _groups_by_smax(config)
    if len(groups) > 1:
        raise ScenarioError("learners need a common s_max across services", field="system.s_max")
    res = fn(config.services, K, H, make_rng(seed, 0))
    return _learn_bundle(name, config, res, label)


def cmd_learn_q(sc, seed, threads):
    l = sc.learning
    return _learn(sc, seed, lambda p, K, H, rng: run_q_whittle(
        p, K, H, sc.schedules, rng, mode=l["q_mode"]), "learn_q", "learned")


def cmd_baseline(sc, seed, threads):
    l = sc.learning
    return _learn(sc, seed, lambda p, K, H, rng: run_epsilon_greedy_baseline(
        p, K, H, sc.schedules, l["eps_explore"], rng, l["greedy_with_prob_eps"]), "baseline", "learned")


def cmd_table1(sc, seed, threads):
    rows = run_table1(threads=threads, **sc.params)
    b = ResultBundle("table1")
    b.add_table("gaps", ["s_max", "ratio", "f_opt", "whittle_cost", "gap_pct", "reference_pct"],
                [[r.s_max, r.ratio, r.f_opt, r.whittle_cost, r.gap_pct,
                  TABLE1_REFERENCE.get(int(r.ratio))] for r in rows])
    b.summary = {"min_gap_pct": min(r.gap_pct for r in rows)}
    return b


def cmd_switching_curve(sc, seed, threads):
    res = run_switching_curve(**sc.params)
    b = ResultBundle("switching_curve")
    rows = [[i, j, int(res.optimal[i, j]), int(res.index_rule[i, j])]
            for i, j in np.ndindex(*res.optimal.shape)]
    b.add_table("served", ["s0", "s1", "optimal", "index_rule"], rows)
    b.summary = {"agreement": res.agreement, "f_opt": res.f_opt, "whittle_cost": res.whittle_cost}
    return b


def cmd_convergence(sc, seed, threads):
    l = sc.learning
    res = run_convergence(H=l["horizon"], episodes=l["episodes"], seeds=range(sc.replications),
                          schedules=sc.schedules, eps_explore=l["eps_explore"], q_mode=l["q_mode"],
                          base_seed=seed, threads=threads, **sc.params)
    b = ResultBundle("convergence")
    rows = []
    for name, tr in res.traces.items():
        for r in range(tr.shape[0]):
            for k in range(tr.shape[1]):
                for s in range(tr.shape[2]):
                    rows.append([name, r, k, s, tr[r, k, s]])
    b.add_table("traces", ["algorithm", "replication", "episode", "state", "W_iterate"], rows)
    b.add_table("truth", ["state", "index"], [[s, v] for s, v in enumerate(res.truth)])
    b.summary = {"episodes_to_tolerance": res.episodes_to_tol}
    return b


def cmd_mse_vs_n(sc, seed, threads):
    l = sc.learning
    params = dict(sc.params)
    res = run_mse_vs_n(episodes=params.pop("episodes", 150), H=l["horizon"],
                       reps=params.pop("reps", sc.replications), schedules=sc.schedules,
                       eps_explore=l["eps_explore"], q_mode=l["q_mode"], base_seed=seed,
                       threads=threads, **params)
    b = ResultBundle("mse_vs_n")
    b.add_table("mse", ["N"] + list(res.mse),
                [[n] + [res.mse[k][i] for k in res.mse] for i, n in enumerate(res.ns)])
    b.summary = {"formula": "mean over replications of ((C_learned - C_true) / N)^2, costs from "
                            "paired long-run simulation under common random numbers",
                 "inversions": {k: count_inversions(v) for k, v in res.mse.items()}}
    return b


COMMANDS = {
    "whittle-table": cmd_whittle_table, "optimal": cmd_optimal, "simulate": cmd_simulate,
    "learn-ucb": cmd_learn_ucb, "learn-q": cmd_learn_q, "baseline": cmd_baseline,
    "table1": cmd_table1, "switching-curve": cmd_switching_curve, "convergence": cmd_convergence,
    "mse-vs-n": cmd_mse_vs_n,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, val in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, val)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = _scenario(args, args.command)
        _apply_overrides(args, sc)
        seed = args.seed if args.seed is not None else sc.seed
        if seed < 0:
            raise ScenarioError("must be non-negative", field="seed")
        out = args.out if args.out is not None else Path(sc.output)
        bundle = COMMANDS[args.command](sc, seed, max(1, args.threads))
        files = emit_results(bundle, out, args.format, sc, seed)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TypeError as exc:
        # unknown keys in the experiment params section
        print(f"config error: params: {exc}", file=sys.stderr)
        return 2
    except ResourceBudgetError as exc:
        print(f"resource budget exceeded: {exc}", file=sys.stderr)
        return 3
    except (EdgeWhittleError, ValueError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
