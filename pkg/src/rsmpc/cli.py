"""Command-line experiment runner.

    rsmpc run <config.json> [--out DIR] [--seed N] [--paths N] [--tol X] [--workers N]
    rsmpc validate <config.json>
    rsmpc oracle-check <config.json>

Exit codes: 0 success, 1 oracle mismatch, 2 configuration error, 3 solver
failure, 4 breakdown detected.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass

import jsonschema
import numpy as np
import scipy

from . import __version__
from .errors import BreakdownError, ConfigError, DegeneracyError, PolicyError, ProblemError, SolverError
from .leqr import leqr_kkt_solve
from .mpc import PlannerOptions, evaluate_policy_mc, plan
from .planner import BREAKDOWN, certainty_equivalent_plan, risk_averse_ccp, risk_seeking_plan
from .problem import battery_problem, build_problem, daily_profile, lqr_problem, tou_prices

log = logging.getLogger("rsmpc")

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_SOLVER, EXIT_BREAKDOWN = 0, 1, 2, 3, 4

_NUM = {"type": "number"}
_MATRIX = {"type": "array"}

SCHEMA = {
    "type": "object",
    "required": ["problem"],
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object",
            "oneOf": [
                {
                    "required": ["builder", "params"],
                    "additionalProperties": False,
                    "properties": {
                        "builder": {"const": "battery"},
                        "params": {
                            "type": "object",
                            "required": ["baseline"],
                            "additionalProperties": False,
                            "properties": {
                                "T": {"type": "integer", "minimum": 1},
                                "h": {"type": "number", "exclusiveMinimum": 0},
                                "q_init": _NUM,
                                "q_max": {"type": "number", "exclusiveMinimum": 0},
                                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                "sigma": {"type": "number", "minimum": 0},
                                "p_load_init": _NUM,
                                "start_hour": _NUM,
                                "prices": {
                                    "oneOf": [
                                        {"type": "array", "items": _NUM},
                                        {
                                            "type": "object",
                                            "additionalProperties": False,
                                            "properties": {"night": _NUM, "peak": _NUM, "shoulder": _NUM},
                                        },
                                    ]
                                },
                                "baseline": {
                                    "oneOf": [
                                        {"type": "array", "items": _NUM},
                                        {
                                            "type": "object",
                                            "required": ["breakpoints"],
                                            "additionalProperties": False,
                                            "properties": {
                                                "breakpoints": {
                                                    "type": "array",
                                                    "minItems": 1,
                                                    "items": {"type": "array", "items": _NUM,
                                                              "minItems": 2, "maxItems": 2},
                                                }
                                            },
                                        },
                                    ]
                                },
                            },
                        },
                    },
                },
                {
                    "required": ["builder", "params"],
                    "additionalProperties": False,
                    "properties": {
                        "builder": {"const": "lqr"},
                        "params": {
                            "type": "object",
                            "required": ["A", "B", "Q", "R", "Sigma", "T", "x_init"],
                            "additionalProperties": False,
                            "properties": {
                                "A": _MATRIX, "B": _MATRIX, "Q": _MATRIX, "R": _MATRIX,
                                "Sigma": {"type": ["array", "number"]},
                                "T": {"type": "integer", "minimum": 1},
                                "x_init": {"type": ["array", "number"]},
                            },
                        },
                    },
                },
                {
                    "required": ["inline"],
                    "additionalProperties": False,
                    "properties": {"inline": {"type": "object", "required": ["T", "x_init", "A", "B", "noise"]}},
                },
            ],
        },
        "policies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["mode"],
                "additionalProperties": False,
                "properties": {
                    "mode": {"enum": ["neutral", "seeking", "averse"]},
                    "gamma": _NUM,
                    "label": {"type": "string", "pattern": "^[A-Za-z0-9_.+-]+$"},
                },
            },
        },
        "eval_gammas": {"type": "array", "items": _NUM, "minItems": 1},
        "bound_gammas": {"type": "array", "items": _NUM},
        "n_paths": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "stall_window": {"type": "integer", "minimum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
                "breakdown_cap": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

BATTERY_DEFAULTS = {
    "T": 300,
    "q_init": 2.5,
    "q_max": 5.0,
    "alpha": 0.5,
    "sigma": 0.2,
    "start_hour": 0.0,
    "prices": {"night": 15.0, "peak": 40.0, "shoulder": 25.0},
}
TOP_DEFAULTS = {
    "policies": [{"mode": "neutral"}],
    "eval_gammas": [0.0],
    "n_paths": 2000,
    "seed": 0,
    "workers": 1,
    "output_dir": "out",
}


@dataclass
class ExperimentConfig:
    """A validated configuration with every default filled in."""

    raw: dict  # resolved configuration, echoed into metadata.json
    problem: object
    policies: list  # (label, mode, gamma)
    eval_gammas: list
    bound_gammas: list
    n_paths: int
    seed: int
    workers: int
    output_dir: str
    opts: PlannerOptions


def _policy_label(p):
    if "label" in p:
        return p["label"]
    if p["mode"] == "neutral":
        return "neutral"
    return f"{p['mode']}_{p['gamma']:g}"


def _resolve(cfg):
    """Fill defaults in a schema-valid config (returns a new dict)."""
    cfg = copy.deepcopy(cfg)
    for k, v in TOP_DEFAULTS.items():
        cfg.setdefault(k, copy.deepcopy(v))
    solver = cfg.setdefault("solver", {})
    for k, v in PlannerOptions().__dict__.items():
        solver.setdefault(k, v)
    prob = cfg["problem"]
    if prob.get("builder") == "battery":
        params = prob["params"]
        for k, v in BATTERY_DEFAULTS.items():
            params.setdefault(k, copy.deepcopy(v))
        params.setdefault("h", 48.0 / params["T"])
        if isinstance(params["prices"], dict):
            for k, v in BATTERY_DEFAULTS["prices"].items():
                params["prices"].setdefault(k, v)
    for p in cfg["policies"]:
        if p["mode"] == "neutral":
            p.setdefault("gamma", 0.0)
        elif "gamma" not in p:
            raise ConfigError(f"policies: mode {p['mode']!r} needs a gamma")
        if p["mode"] == "averse" and p["gamma"] < 0:
            raise ConfigError("policies: averse mode needs gamma >= 0")
        if p["mode"] == "seeking" and p["gamma"] > 0:
            raise ConfigError("policies: seeking mode needs gamma <= 0")
        p.setdefault("label", _policy_label(p))
    labels = [p["label"] for p in cfg["policies"]]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"policies: duplicate labels {labels}")
    if "bound_gammas" not in cfg:
        cfg["bound_gammas"] = sorted({float(p["gamma"]) for p in cfg["policies"] if p["gamma"] != 0})
    return cfg


def build_from_config(prob):
    """Build the :class:`ControlProblem` described by the ``problem`` section."""
    builder = prob.get("builder")
    if builder == "battery":
        p = prob["params"]
        T, h = p["T"], p["h"]
        if isinstance(p["prices"], dict):
            prices = tou_prices(T, h, start_hour=p["start_hour"], **p["prices"])
        else:
            prices = np.array(p["prices"], dtype=float)
            if prices.size != T:
                raise ConfigError(f"problem.params.prices: {prices.size} entries, expected T={T}")
        if isinstance(p["baseline"], dict):
            base = daily_profile(T, h, p["baseline"]["breakpoints"], start_hour=p["start_hour"])
        else:
            base = np.array(p["baseline"], dtype=float)
            if base.size != T:
                raise ConfigError(f"problem.params.baseline: {base.size} entries, expected T={T}")
        return battery_problem(prices, base, p["alpha"], p["sigma"], h, T, p["q_init"], p["q_max"],
                               p.get("p_load_init"))
    if builder == "lqr":
        p = prob["params"]
        return lqr_problem(p["A"], p["B"], p["Q"], p["R"], p["Sigma"], p["T"],
                           np.atleast_1d(np.array(p["x_init"], dtype=float)))
    return build_problem(prob["inline"])


def parse_config(path):
    """Read, validate and resolve a JSON experiment configuration.

    Raises:
        ConfigError: with the line and column of a JSON syntax error, or the
            field path of a schema violation.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(cfg, source=str(path))


def config_from_dict(cfg, source="<config>"):
    """Validate and resolve an already-parsed configuration dict."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{source}: at {where}: {err.message}")
    cfg = _resolve(cfg)
    try:
        problem = build_from_config(cfg["problem"])
    except ProblemError as exc:
        raise ConfigError(f"{source}: problem: {exc}") from None
    s = cfg["solver"]
    opts = PlannerOptions(s["tol"], s["eps"], s["stall_window"], s["max_iter"], s["breakdown_cap"])
    return ExperimentConfig(
        raw=cfg,
        problem=problem,
        policies=[(p["label"], p["mode"], float(p["gamma"])) for p in cfg["policies"]],
        eval_gammas=[float(g) for g in cfg["eval_gammas"]],
        bound_gammas=[float(g) for g in cfg["bound_gammas"]],
        n_paths=cfg["n_paths"],
        seed=cfg["seed"],
        workers=cfg["workers"],
        output_dir=cfg["output_dir"],
        opts=opts,
    )


# --- output -------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([c if isinstance(c, str) else _fmt(c) for c in r])


def _column_names(problem):
    if problem.meta.get("kind") == "battery":
        return ["q", "p_load"], ["p_batt", "p_grid"], ["lam_q", "lam_load"]
    n, m = problem.n, problem.m
    return ([f"x{i}" for i in range(n)], [f"u{i}" for i in range(m)], [f"lam{i}" for i in range(n)])


def _is_leqr(problem):
    return all(s.ineq_F.shape[0] == 0 for s in problem.stage) and all(
        nm.family == "gaussian" for nm in problem.noise
    )


def _leqr_bound(problem, gamma):
    try:
        r = leqr_kkt_solve(problem, gamma)
    except DegeneracyError:
        return None
    return r.bound if r.status == "ok" else None


def run_experiment(cfg, out_dir=None):
    """Run every stage of the experiment and write the CSV artifacts.

    Returns the exit code. Files are written even when some stage fails; the
    failure is recorded in ``metadata.json``.
    """
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    problem, opts = cfg.problem, cfg.opts
    T = problem.T
    xs, us, ls = _column_names(problem)
    issues = []
    code = EXIT_OK

    def fail(stage, exc):
        nonlocal code
        kind = EXIT_BREAKDOWN if isinstance(exc, BreakdownError) or (
            isinstance(exc, PolicyError) and isinstance(exc.cause, BreakdownError)) else EXIT_SOLVER
        code = max(code, kind)
        issues.append({"stage": stage, "error": type(exc).__name__, "message": str(exc)})
        log.error("%s: %s", stage, exc)

    # open-loop plans and evaluation
    plans, evals = {}, {}
    for label, mode, gamma in cfg.policies:
        try:
            plans[label] = plan(problem, gamma, mode, opts)[0]
        except (BreakdownError, SolverError) as exc:
            fail(f"plan {label}", exc)
        log.info("evaluating %s on %d paths", label, cfg.n_paths)
        evals[label] = evaluate_policy_mc(problem, mode, gamma, cfg.eval_gammas, cfg.n_paths, cfg.seed,
                                          opts=opts, workers=cfg.workers, with_prescient=True,
                                          keep_paths=(0,))
        for idx, kind, msg in evals[label].failures:
            issues.append({"stage": f"path {idx} of {label}", "error": kind, "message": msg})
            code = max(code, EXIT_BREAKDOWN if kind == "breakdown" else EXIT_SOLVER)

    # trajectories.csv: plans and the closed loop on path 0
    header = ["t"]
    cols = []
    for label, _, _ in cfg.policies:
        header += [f"{label}_{c}" for c in xs + us + ls]
        header += [f"{label}_cl_{c}" for c in xs + us]
        sol = plans.get(label)
        cl = evals[label].kept.get(0)
        nan_x, nan_u = np.full((T, problem.n), np.nan), np.full((T, problem.m), np.nan)
        cols.append((
            sol.x_traj[:T] if sol else nan_x,
            sol.u_traj if sol else nan_u,
            sol.lam if sol else nan_x,
            cl.x_realized[:T] if cl else nan_x,
            cl.u_applied if cl else nan_u,
        ))
    rows = []
    for t in range(T):
        row = [t]
        for block in cols:
            for arr in block:
                row += list(arr[t])
        rows.append(row)
    _write_csv(os.path.join(out_dir, "trajectories.csv"), header, rows)

    # costs.csv
    first = evals[cfg.policies[0][0]]
    header = ["path", "prescient"] + [label for label, _, _ in cfg.policies]
    rows = [[i, first.prescient_costs[i]] + [evals[l].costs[i] for l, _, _ in cfg.policies]
            for i in range(cfg.n_paths)]
    _write_csv(os.path.join(out_dir, "costs.csv"), header, rows)

    # risk_table.csv
    header = ["policy", "mode", "gamma_policy", "gamma_eval", "value", "ci_low", "ci_high",
              "n_success", "n_failed"]
    rows = []
    for label, mode, gamma in cfg.policies:
        ev = evals[label]
        for est in ev.estimates:
            rows.append([label, mode, gamma, est.gamma, est.value, est.ci_low, est.ci_high,
                         ev.n_success, len(ev.failures)])
    _write_csv(os.path.join(out_dir, "risk_table.csv"), header, rows)

    # bounds.csv
    header = ["gamma", "k", "ce_bound", "ccp_bound", "seeking_bound", "step_inf", "leqr_bound"]
    rows = []
    try:
        ce = certainty_equivalent_plan(problem, tol=opts.tol).value
    except SolverError as exc:
        fail("certainty-equivalent bound", exc)
        ce = None
    leqr = _is_leqr(problem)
    for g in cfg.bound_gammas if ce is not None else []:
        lb = _leqr_bound(problem, g) if leqr else None
        try:
            if g > 0:
                res = risk_averse_ccp(problem, g, eps=opts.eps, stall_window=opts.stall_window,
                                      max_iter=opts.max_iter, breakdown_cap=opts.breakdown_cap, tol=opts.tol)
                for k, _, b, step in res.history:
                    rows.append([g, k, ce, b, None, step, lb])
                if res.status == BREAKDOWN:
                    res.require_ok()
            elif g < 0:
                res = risk_seeking_plan(problem, g, tol=opts.tol, breakdown_cap=opts.breakdown_cap)
                rows.append([g, 0, ce, None, None if res.status == BREAKDOWN else res.bound, None, lb])
                res.require_ok()
        except (BreakdownError, SolverError) as exc:
            fail(f"bound at gamma={g:g}", exc)
    _write_csv(os.path.join(out_dir, "bounds.csv"), header, rows)

    meta = {
        "config": cfg.raw,
        "versions": {
            "rsmpc": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "seed": cfg.seed,
        "seed_scheme": "path i draws from numpy.random.default_rng([seed, i]), periods in order",
        "n_paths": cfg.n_paths,
        "exit_code": code,
        "complete": code == EXIT_OK,
        "issues": issues,
    }
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return code


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def oracle_check(cfg, gammas=None, stream=None):
    """Compare planner bounds with the exact LEQR solution; returns an exit code."""
    stream = stream or sys.stdout
    problem, opts = cfg.problem, cfg.opts
    if not _is_leqr(problem):
        raise ConfigError("oracle-check needs unconstrained quadratic costs and Gaussian noise")
    gammas = gammas or cfg.bound_gammas or [0.5]
    code = EXIT_OK
    print("gamma\tplanner\tplanner_bound\tleqr_bound\tw_diff\tverdict", file=stream)
    for g in gammas:
        r = leqr_kkt_solve(problem, g)
        if g > 0:
            res = risk_averse_ccp(problem, g, eps=min(opts.eps, 1e-12), stall_window=opts.stall_window,
                                  max_iter=max(opts.max_iter, 2000), breakdown_cap=opts.breakdown_cap, tol=opts.tol)
            name, bad = "ccp", res.status == BREAKDOWN
        else:
            res = risk_seeking_plan(problem, g, tol=opts.tol, breakdown_cap=opts.breakdown_cap)
            name, bad = "seeking", res.status == BREAKDOWN
        if r.status != "ok" or bad:
            agree = (r.status != "ok") == bad
            verdict = "breakdown (agree)" if agree else "breakdown (DISAGREE)"
            code = max(code, EXIT_BREAKDOWN if agree else EXIT_MISMATCH)
            pb = "" if bad else repr(float(res.bound))
            lb = "" if r.status != "ok" else repr(float(r.bound))
            print(f"{g:g}\t{name}\t{pb}\t{lb}\t\t{verdict}", file=stream)
            continue
        diff = float(np.max(np.abs(r.w.reshape(-1) - res.w_star)))
        ok = abs(r.bound - res.bound) <= 1e-6 and diff <= 1e-5
        if not ok:
            code = max(code, EXIT_MISMATCH)
        print(f"{g:g}\t{name}\t{float(res.bound)!r}\t{float(r.bound)!r}\t{diff:.3e}\t{'ok' if ok else 'MISMATCH'}", file=stream)
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(prog="rsmpc", description="Risk-sensitive MPC experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write CSV outputs")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=int, help="top-level seed")
    run.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    run.add_argument("--tol", type=float, help="QP tolerance")
    run.add_argument("--workers", type=int, help="processes for path evaluation")
    val = sub.add_parser("validate", help="check a configuration file")
    val.add_argument("config")
    orc = sub.add_parser("oracle-check", help="compare planners with the exact LEQR solution")
    orc.add_argument("config")
    orc.add_argument("--gamma", type=float, action="append", help="gamma to check (repeatable)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    try:
        if args.command == "run":
            with open(args.config) as fh:
                text = fh.read()
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
            overrides = {"seed": args.seed, "n_paths": args.paths, "output_dir": args.out, "workers": args.workers}
            for k, v in overrides.items():
                if v is not None:
                    raw[k] = v
            if args.tol is not None:
                raw.setdefault("solver", {})["tol"] = args.tol
            cfg = config_from_dict(raw, source=args.config)
            return run_experiment(cfg)
        cfg = parse_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok (T={cfg.problem.T}, n={cfg.problem.n}, m={cfg.problem.m}, "
                  f"{len(cfg.policies)} policies, {cfg.n_paths} paths)")
            return EXIT_OK
        return oracle_check(cfg, args.gamma)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegeneracyError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
