"""Shrinking-horizon MPC policies and closed-loop Monte Carlo evaluation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BreakdownError, PolicyError, SolverError
from .planner import (
    BREAKDOWN,
    certainty_equivalent_plan,
    risk_averse_ccp,
    risk_seeking_plan,
)
from .prescient import DEFAULT_TOL, prescient_solve
from .risk import BREAKDOWN_CAP, is_neutral, risk_mc

MODES = ("neutral", "seeking", "averse")


@dataclass(frozen=True)
class PlannerOptions:
    """Tolerances shared by the planners."""

    tol: float = DEFAULT_TOL
    eps: float = 1e-6
    stall_window: int = 5
    max_iter: int = 100
    breakdown_cap: float = BREAKDOWN_CAP


@dataclass(frozen=True)
class StepRecord:
    """Diagnostics of one MPC step."""

    t: int
    status: str
    iterations: int
    bound: float


@dataclass
class ClosedLoopResult:
    """Realized closed-loop trajectory and cost."""

    x_realized: np.ndarray  # (T+1, n)
    u_applied: np.ndarray  # (T, m)
    w_realized: np.ndarray  # (T, n)
    cost: float
    per_step: list = field(default_factory=list)


def _check_mode(mode, gamma):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "seeking" and gamma > 0 and not is_neutral(gamma):
        raise ValueError("seeking mode needs gamma <= 0")
    if mode == "averse" and gamma < 0 and not is_neutral(gamma):
        raise ValueError("averse mode needs gamma >= 0")


def plan(problem, gamma, mode, opts=None):
    """Plan over the whole horizon of ``problem``.

    Returns ``(solution, record)`` where ``solution`` is the prescient plan the
    policy follows and ``record`` a :class:`StepRecord` for period 0.

    Raises:
        BreakdownError: the planner broke down.
        SolverError: a QP failed.
    """
    opts = opts or PlannerOptions()
    _check_mode(mode, gamma)
    if mode == "neutral" or is_neutral(gamma):
        sol = certainty_equivalent_plan(problem, tol=opts.tol)
        return sol, StepRecord(0, "converged", 0, sol.value)
    if mode == "seeking":
        res = risk_seeking_plan(problem, gamma, tol=opts.tol, breakdown_cap=opts.breakdown_cap)
    else:
        res = risk_averse_ccp(
            problem, gamma, eps=opts.eps, stall_window=opts.stall_window,
            max_iter=opts.max_iter, breakdown_cap=opts.breakdown_cap, tol=opts.tol,
        )
    if res.status == BREAKDOWN:
        res.require_ok()
    return res.final_plan, StepRecord(0, res.status, res.iterations, res.bound)


def _step(problem, t, x_t, gamma, mode, opts):
    if not 0 <= t < problem.T:
        raise ValueError(f"step index {t} outside [0, {problem.T})")
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    if x_t.size != problem.n:
        raise ValueError(f"state has {x_t.size} entries, expected {problem.n}")
    try:
        sol, rec = plan(problem.tail(t, x_t), gamma, mode, opts)
    except (BreakdownError, SolverError) as exc:
        raise PolicyError(str(exc), t, exc) from exc
    return sol.u_traj[0].copy(), StepRecord(t, rec.status, rec.iterations, rec.bound)


def mpc_step(problem, t, x_t, gamma, mode, opts=None):
    """First input of the plan for the tail problem starting at period ``t`` in state ``x_t``.

    Raises:
        PolicyError: the planner broke down or the tail problem could not be solved.
    """
    _check_mode(mode, gamma)
    return _step(problem, t, x_t, gamma, mode, opts)[0]


def simulate_closed_loop(problem, gamma, mode, w_path, opts=None):
    """Run the shrinking-horizon policy against the noise path ``w_path`` (T, n).

    Raises:
        PolicyError: annotated with the failing step.
    """
    _check_mode(mode, gamma)
    T, n = problem.T, problem.n
    w = np.asarray(w_path, dtype=float).reshape(T, n)
    x = np.empty((T + 1, n))
    u = np.empty((T, problem.m))
    x[0] = problem.x_init
    records = []
    for t in range(T):
        u[t], rec = _step(problem, t, x[t], gamma, mode, opts)
        records.append(rec)
        x[t + 1] = problem.A[t] @ x[t] + problem.B[t] @ u[t] + w[t]
    return ClosedLoopResult(x, u, w.copy(), float(problem.cost(x, u)), records)


# --- Monte Carlo evaluation ---------------------------------------------------


def path_noise(problem, seed, index):
    """Noise path number ``index`` for top-level ``seed``; shape (T, n).

    Each path has its own generator seeded with ``(seed, index)``, so paths can
    be produced in any order or in parallel.
    """
    rng = np.random.default_rng([int(seed), int(index)])
    return np.stack([nm.draw(rng, 1)[0] for nm in problem.noise])


@dataclass
class PolicyEvaluation:
    """Monte Carlo evaluation of one policy.

    ``costs`` has one entry per path, NaN for failed paths; ``failures`` lists
    ``(path_index, kind, message)`` with ``kind`` either ``breakdown`` or
    ``solver``. ``estimates`` are computed over successful paths only and are
    empty when every path failed. ``kept`` maps requested path indices to
    their :class:`ClosedLoopResult`.
    """

    mode: str
    gamma_policy: float
    estimates: list
    costs: np.ndarray
    failures: list
    prescient_costs: np.ndarray | None = None
    kept: dict = field(default_factory=dict)

    @property
    def n_success(self):
        return int(np.sum(np.isfinite(self.costs)))


def _run_path(args):
    problem, mode, gamma, seed, index, opts, with_prescient, keep = args
    w = path_noise(problem, seed, index)
    jpr = np.nan
    if with_prescient:
        sol = prescient_solve(problem, w, tol=opts.tol if opts else DEFAULT_TOL)
        jpr = sol.value if sol.ok else np.nan
    try:
        res = simulate_closed_loop(problem, gamma, mode, w, opts)
    except PolicyError as exc:
        kind = "breakdown" if isinstance(exc.cause, BreakdownError) else "solver"
        return np.nan, jpr, (kind, str(exc)), None
    return res.cost, jpr, None, res if keep else None


def evaluate_policy_mc(problem, mode, gamma_policy, gamma_eval, n_paths, seed,
                       opts=None, workers=1, with_prescient=False, keep_paths=()):
    """Closed-loop Monte Carlo evaluation of a shrinking-horizon policy.

    Args:
        problem: the control problem.
        mode: ``neutral``, ``seeking`` or ``averse``.
        gamma_policy: risk parameter used by the planner.
        gamma_eval: risk parameters at which to estimate ``R_gamma(C)``.
        n_paths: number of sampled noise paths.
        seed: top-level seed; path ``i`` uses :func:`path_noise` ``(seed, i)``.
        opts: :class:`PlannerOptions`.
        workers: processes for path evaluation; results do not depend on it.
        with_prescient: also record ``J_pr(w)`` for each path.
        keep_paths: path indices whose full closed-loop result is returned.

    Returns:
        A :class:`PolicyEvaluation`.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    _check_mode(mode, gamma_policy)
    keep = set(keep_paths)
    jobs = [(problem, mode, gamma_policy, seed, i, opts, with_prescient, i in keep) for i in range(n_paths)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_path, jobs, chunksize=max(1, n_paths // (4 * workers))))
    else:
        out = [_run_path(j) for j in jobs]
    costs = np.array([o[0] for o in out], dtype=float)
    jpr = np.array([o[1] for o in out], dtype=float) if with_prescient else None
    failures = [(i, o[2][0], o[2][1]) for i, o in enumerate(out) if o[2] is not None]
    kept = {i: o[3] for i, o in enumerate(out) if o[3] is not None}
    ok = costs[np.isfinite(costs)]
    estimates = [risk_mc(ok, g) for g in gamma_eval] if ok.size else []
    return PolicyEvaluation(mode, float(gamma_policy), estimates, costs, failures, jpr, kept)
