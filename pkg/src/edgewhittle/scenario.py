"""Scenario files (YAML) and result bundles.

Schema (all keys optional unless noted)::

    experiment: custom            # table1 | switching-curve | convergence | mse-vs-n | custom
    seed: 0                       # required, non-negative integer
    replications: 10
    output: out                   # directory for emitted files
    system:                       # required for custom runs
      capacity: 1                 # required
      s_max: 40                   # default truncation for every service
      services:                   # required, at least one entry
        - {lam: 20, mu: 5}
        - {lam: 30, mu: 5, s_max: 40}
    learning:
      episodes: 200
      horizon: 100
      alpha: 0.01
      gamma: 0.005
      schedule: constant          # constant | decaying
      tau_alpha: 10000
      tau_gamma: 100
      q_mode: relative            # relative | literal
      eps_explore: 0.5
      greedy_with_prob_eps: true
    ucb:
      eps: null                   # null means 1/T
      delta: null                 # null means 1/T
      b: 2
      K1: null                    # null means 2 * tau_h^2
      lam_factors: [0.8, 1.0, 1.25]
      mu_factors: [1.0]
      classes: null               # class label per service; null means one class each
    simulate:
      events: 100000
      policy: whittle             # whittle | optimal | threshold
      thresholds: null            # per-service thresholds for policy=threshold
      trace: null                 # optional trace path (.csv or .csv.gz)
    params: {}                    # experiment-specific overrides, passed as keyword arguments
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import yaml

from .errors import ScenarioError
from .model import ServiceParams, SystemConfig
from .qlearn import RateSchedules

EXPERIMENTS = ("table1", "switching-curve", "convergence", "mse-vs-n", "custom")

DEFAULTS: dict[str, Any] = {
    "experiment": "custom",
    "replications": 10,
    "output": "out",
    "learning": {
        "episodes": 200, "horizon": 100, "alpha": 0.01, "gamma": 0.005, "schedule": "constant",
        "tau_alpha": 1e4, "tau_gamma": 100.0, "q_mode": "relative", "eps_explore": 0.5,
        "greedy_with_prob_eps": True,
    },
    "ucb": {"eps": None, "delta": None, "b": 2.0, "K1": None, "lam_factors": [0.8, 1.0, 1.25],
            "mu_factors": [1.0], "classes": None},
    "simulate": {"events": 100_000, "policy": "whittle", "thresholds": None, "trace": None},
    "params": {},
}


@dataclass
class Scenario:
    raw: dict
    system: SystemConfig | None
    experiment: str
    seed: int
    replications: int
    output: str
    learning: dict
    ucb: dict
    simulate: dict
    params: dict
    lines: dict = field(default_factory=dict, repr=False)

    @property
    def schedules(self) -> RateSchedules:
        l = self.learning
        return RateSchedules(l["alpha"], l["gamma"], l["schedule"], l["tau_alpha"], l["tau_gamma"])

    def canonical(self) -> dict:
        return _normalize(self.raw)

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _line_map(node, prefix="", out=None):
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = v.start_mark.line + 1
            _line_map(v, path, out)
    return out


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _normalize(raw: dict) -> dict:
    return _merge(DEFAULTS, raw)


def _num(d, key, path, lines, kind=float, positive=True, allow_none=False):
    v = d.get(key)
    full = f"{path}.{key}" if path else key
    if v is None:
        if allow_none:
            return None
        raise ScenarioError("missing required value", field=full, line=lines.get(full, lines.get(path)))
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"expected a number, got {v!r}", field=full, line=lines.get(full))
    if kind is int and int(v) != v:
        raise ScenarioError(f"expected an integer, got {v!r}", field=full, line=lines.get(full))
    if positive and v <= 0:
        raise ScenarioError(f"must be positive, got {v!r}", field=full, line=lines.get(full))
    return kind(v)


def build_scenario(raw: dict, lines: dict | None = None) -> Scenario:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ScenarioError("top level must be a mapping")
    unknown = set(raw) - set(DEFAULTS) - {"seed", "system"}
    if unknown:
        key = sorted(unknown)[0]
        raise ScenarioError(f"unknown key; expected one of {sorted(set(DEFAULTS) | {'seed', 'system'})}",
                            field=key, line=lines.get(key))
    data = _normalize(raw)
    exp = data["experiment"]
    if exp not in EXPERIMENTS:
        raise ScenarioError(f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}",
                            field="experiment", line=lines.get("experiment"))
    if "seed" not in raw:
        raise ScenarioError("missing required value (no wall-clock seeding)", field="seed")
    seed = _num(data, "seed", "", lines, int, positive=False)
    if seed < 0:
        raise ScenarioError("must be non-negative", field="seed", line=lines.get("seed"))
    reps = _num(data, "replications", "", lines, int)

    system = None
    if "system" in raw:
        system = _parse_system(raw["system"], lines)
    elif exp == "custom":
        raise ScenarioError("missing required section", field="system")

    lrn = data["learning"]
    for key in ("episodes", "horizon"):
        _num(lrn, key, "learning", lines, int)
    for key in ("alpha", "gamma"):
        _num(lrn, key, "learning", lines, positive=False)
    if lrn["schedule"] not in ("constant", "decaying"):
        raise ScenarioError("expected constant or decaying", field="learning.schedule",
                            line=lines.get("learning.schedule"))
    if lrn["q_mode"] not in ("relative", "literal"):
        raise ScenarioError("expected relative or literal", field="learning.q_mode",
                            line=lines.get("learning.q_mode"))
    e = _num(lrn, "eps_explore", "learning", lines)
    if e > 1:
        raise ScenarioError("must lie in (0, 1]", field="learning.eps_explore",
                            line=lines.get("learning.eps_explore"))
    sim = data["simulate"]
    _num(sim, "events", "simulate", lines, int)
    if sim["policy"] not in ("whittle", "optimal", "threshold"):
        raise ScenarioError("expected whittle, optimal or threshold", field="simulate.policy",
                            line=lines.get("simulate.policy"))
    if system is not None and data["ucb"]["classes"] is not None \
            and len(data["ucb"]["classes"]) != system.n:
        raise ScenarioError("need one class label per service", field="ucb.classes",
                            line=lines.get("ucb.classes"))
    if not isinstance(data["params"], dict):
        raise ScenarioError("expected a mapping", field="params", line=lines.get("params"))
    return Scenario(raw, system, exp, seed, reps, str(data["output"]), lrn, data["ucb"], sim,
                    data["params"], lines)


def _parse_system(sys_raw, lines) -> SystemConfig:
    if not isinstance(sys_raw, dict):
        raise ScenarioError("expected a mapping", field="system", line=lines.get("system"))
    if "capacity" not in sys_raw:
        raise ScenarioError("missing required value", field="capacity", line=lines.get("system"))
    cap = _num(sys_raw, "capacity", "system", lines, int)
    default_smax = sys_raw.get("s_max", 40)
    svcs = sys_raw.get("services")
    if not isinstance(svcs, list) or not svcs:
        raise ScenarioError("need a non-empty list of services", field="system.services",
                            line=lines.get("system.services", lines.get("system")))
    out = []
    for i, s in enumerate(svcs):
        path = f"system.services[{i}]"
        if not isinstance(s, dict):
            raise ScenarioError("expected a mapping with lam and mu", field=path, line=lines.get(path))
        lam = _num(s, "lam", path, lines)
        mu = _num(s, "mu", path, lines)
        sm = _num({"s_max": s.get("s_max", default_smax)}, "s_max", path, lines, int)
        if sm < 2:
            raise ScenarioError("must be at least 2", field=f"{path}.s_max", line=lines.get(path))
        out.append(ServiceParams(lam, mu, sm))
    return SystemConfig(tuple(out), cap)


def parse_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"malformed YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    return build_scenario(raw if raw is not None else {}, _line_map(node) if node is not None else {})


# ---------------------------------------------------------------------------
# Results


@dataclass
class ResultBundle:
    name: str
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def add_table(self, name, columns, rows):
        self.tables[name] = (list(columns), [list(r) for r in rows])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_metadata(scenario: Scenario | None, seed: int) -> dict:
    from . import __version__

    return {
        "scenario_hash": scenario.hash() if scenario is not None else None,
        "seed": int(seed),
        "versions": {"edgewhittle": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }


def emit_results(bundle: ResultBundle, out_dir, fmt: str = "csv", scenario: Scenario | None = None,
                 seed: int = 0) -> list[Path]:
    """Write every table plus a JSON summary; files are replaced atomically."""
    out = Path(out_dir)
    written = []
    for name, (cols, rows) in bundle.tables.items():
        if fmt == "csv":
            lines = [",".join(cols)] + [",".join(_fmt(v) for v in r) for r in rows]
            p = out / f"{bundle.name}_{name}.csv"
            atomic_write(p, "\n".join(lines) + "\n")
        else:
            p = out / f"{bundle.name}_{name}.json"
            recs = [dict(zip(cols, _jsonable(r))) for r in rows]
            atomic_write(p, json.dumps(recs, indent=1) + "\n")
        written.append(p)
    summary = {"run": run_metadata(scenario, seed), **_jsonable(bundle.summary)}
    if scenario is not None:
        summary["scenario"] = _jsonable(scenario.canonical())
    p = out / f"{bundle.name}_summary.json"
    atomic_write(p, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    written.append(p)
    return written
