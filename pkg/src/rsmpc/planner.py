"""Certainty-equivalent, risk-seeking and risk-averse planners.

Each planner returns a plan together with a lower bound on the optimal
risk-adjusted cost ``J*``. For any noise path ``w``,

    J_pr(w) - rho(w) / gamma <= J*,

and the planners differ in how they pick ``w``: the mean (certainty
equivalent), a joint convex minimization (``gamma < 0``), or the
convex-concave procedure (``gamma > 0``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp as qpmod
from .errors import BreakdownError, DomainError, SolverError
from .prescient import DEFAULT_TOL, PrescientSolution, _template, prescient_solve
from .qp import QpData, solve_qp
from .risk import BREAKDOWN_CAP, is_neutral

CONVERGED = "converged"
STALLED = "stalled_max_iter"
BREAKDOWN = "breakdown"


def certainty_equivalent_plan(problem, tol=DEFAULT_TOL):
    """Prescient plan at ``w = E w``; its value is Jensen's lower bound on ``J*``."""
    sol = prescient_solve(problem, problem.mean_noise(), tol=tol)
    return sol.require_optimal("certainty-equivalent plan")


# --- risk-averse: convex-concave procedure ------------------------------------


@dataclass
class CcpResult:
    """Outcome of :func:`risk_averse_ccp`.

    ``history`` holds ``(k, w_k, bound_k, step_inf)`` with
    ``step_inf = ||w_k - w_{k-1}||_inf`` (0 for ``k = 0``). ``bound`` is the
    largest recorded bound and ``w_star`` its noise path. When ``status`` is
    ``breakdown``, ``breakdown_kind`` and ``breakdown_index`` describe it.
    """

    gamma: float
    w_star: np.ndarray
    bound: float
    history: list
    status: str
    final_plan: PrescientSolution
    ce_bound: float
    message: str = ""
    breakdown_kind: str | None = None
    breakdown_index: int | None = None

    @property
    def iterations(self):
        return len(self.history) - 1

    @property
    def bounds(self):
        return np.array([h[2] for h in self.history])

    def require_ok(self):
        """Raise :class:`BreakdownError` if the procedure broke down."""
        if self.status == BREAKDOWN:
            raise BreakdownError(self.message, kind=self.breakdown_kind, index=self.breakdown_index)
        return self

    def write_history(self, path):
        """Write the iterate history as CSV: ``k, bound_k, step_inf``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "bound_k", "step_inf"])
            for k, _, b, step in self.history:
                writer.writerow([k, repr(float(b)), repr(float(step))])


def _stacked_rate_at_dual(problem, y):
    """``w = cgf_grad(y)`` period by period, and the total rate at ``w``."""
    T, n = problem.T, problem.n
    y = y.reshape(T, n)
    w = np.empty((T, n))
    total = 0.0
    for t, nm in enumerate(problem.noise):
        try:
            w[t], rho = nm.rate_at_dual(y[t])
        except DomainError as exc:
            idx = t * n + (exc.index or 0)
            raise DomainError(f"t={t}: {exc}", index=idx) from exc
        total += rho
    return w.reshape(-1), total


def risk_averse_ccp(problem, gamma, eps=1e-6, stall_window=5, max_iter=100,
                    breakdown_cap=BREAKDOWN_CAP, tol=DEFAULT_TOL, divergence_window=10):
    """Lower bound for ``gamma > 0`` by the convex-concave procedure.

    Starting at ``w_0 = E w``, each iteration linearizes ``J_pr`` with the
    dynamics duals and maximizes in closed form, ``w_{k+1} = cgf_grad(gamma *
    lambda(w_k))``. Every recorded ``bound_k = J_pr(w_k) - rho(w_k)/gamma`` is
    a valid lower bound on ``J*`` and the sequence is nondecreasing.

    Args:
        problem: the :class:`~rsmpc.problem.ControlProblem`.
        gamma: risk aversion, positive. Values below 1e-9 fall back to the
            certainty-equivalent plan.
        eps: improvement threshold for convergence.
        stall_window: number of consecutive sub-``eps`` improvements needed.
        max_iter: iteration cap; reaching it gives status ``stalled_max_iter``.
        breakdown_cap: bounds above this are treated as divergence.
        tol: tolerance of the prescient QP solves.
        divergence_window: the run is also declared divergent when this many
            consecutive improvements exceed ``eps`` without shrinking, i.e. the
            bound grows at least linearly.

    Returns:
        A :class:`CcpResult`. Breakdown is reported through ``status``.
    """
    gamma = float(gamma)
    if gamma < 0 and not is_neutral(gamma):
        raise ValueError("risk_averse_ccp needs gamma > 0; use risk_seeking_plan")
    w = problem.mean_noise()
    plan = certainty_equivalent_plan(problem, tol=tol)
    ce = plan.value
    history = [(0, w.copy(), ce, 0.0)]
    best = (ce, w.copy(), plan)
    if is_neutral(gamma):
        return CcpResult(gamma, w, ce, history, CONVERGED, plan, ce)

    def result(status, message="", kind=None, index=None):
        b, ws, pl = best
        return CcpResult(gamma, ws, b, history, status, pl, ce, message, kind, index)

    bound = ce
    small = 0
    gains = []
    for k in range(1, max_iter + 1):
        try:
            w_new, rho = _stacked_rate_at_dual(problem, gamma * plan.lam.reshape(-1))
        except DomainError as exc:
            return result(BREAKDOWN, f"iteration {k}: gamma*lambda left the CGF domain ({exc})",
                          "neurotic", exc.index)
        w_size = float(np.max(np.abs(w_new), initial=0.0))
        if not (np.isfinite(w_size) and np.isfinite(rho)) or w_size > breakdown_cap:
            return result(BREAKDOWN, f"iteration {k}: noise iterate of size {w_size:.6g} "
                          f"exceeds cap {breakdown_cap:g}", "neurotic")
        plan = prescient_solve(problem, w_new, tol=tol).require_optimal(f"CCP iteration {k}")
        new = plan.value - rho / gamma
        step = float(np.max(np.abs(w_new - w), initial=0.0))
        history.append((k, w_new.copy(), new, step))
        if not np.isfinite(new) or new > breakdown_cap:
            return result(BREAKDOWN, f"iteration {k}: bound {new:.6g} exceeds cap {breakdown_cap:g}",
                          "neurotic")
        gain = new - bound
        if new > best[0]:
            best = (new, w_new.copy(), plan)
        bound = max(bound, new)
        w = w_new
        gains.append(gain)
        if len(gains) >= divergence_window:
            recent = gains[-divergence_window:]
            if all(g > eps for g in recent) and all(
                b >= a * (1.0 - 1e-6) for a, b in zip(recent, recent[1:])
            ):
                return result(
                    BREAKDOWN,
                    f"iteration {k}: bound increased by at least {recent[0]:.6g} in each of "
                    f"the last {divergence_window} iterations without slowing down",
                    "neurotic",
                )
        # an exact fixed point cannot move again
        if step <= 1e-14 * (1.0 + float(np.max(np.abs(w), initial=0.0))):
            return result(CONVERGED)
        small = small + 1 if gain < eps else 0
        if small >= stall_window:
            return result(CONVERGED)
    return result(STALLED, f"no convergence in {max_iter} iterations")


# --- risk-seeking: joint minimization over (x, u, w) --------------------------


@dataclass
class SeekingResult:
    """Outcome of :func:`risk_seeking_plan`.

    ``bound = J_pr(w) - rho(w)/gamma`` at the optimal ``w``; ``final_plan`` is
    the prescient solution at that ``w``.
    """

    gamma: float
    w_star: np.ndarray
    bound: float
    status: str
    final_plan: PrescientSolution | None
    iterations: int
    ce_bound: float
    message: str = ""
    history: list = field(default_factory=list)

    def require_ok(self):
        if self.status == BREAKDOWN:
            raise BreakdownError(self.message, kind="euphoric")
        return self


def _rate_model(problem, w, free):
    """Per-coordinate value, gradient and curvature of the rate at stacked ``w``."""
    T, n = problem.T, problem.n
    w = w.reshape(T, n)
    g = np.zeros((T, n))
    H = np.zeros((T, n))
    val = 0.0
    f = free.reshape(T, n)
    for t, nm in enumerate(problem.noise):
        if f[t].any():
            val += nm.rate(w[t])
            gt = nm.rate_grad(np.where(f[t], w[t], nm.mean))
            Ht = nm.rate_hess(np.where(f[t], w[t], nm.mean))
            g[t] = np.where(f[t], gt, 0.0)
            H[t] = np.where(f[t], Ht, 0.0)
    return val, g.reshape(-1), H.reshape(-1)


def _rate_box(problem):
    lo = np.concatenate([nm.rate_domain()[0] for nm in problem.noise])
    hi = np.concatenate([nm.rate_domain()[1] for nm in problem.noise])
    return lo, hi


def risk_seeking_plan(problem, gamma, tol=DEFAULT_TOL, max_iter=50,
                      breakdown_cap=BREAKDOWN_CAP, decrease_tol=1e-8, divergence_window=10):
    """Lower bound for ``gamma < 0`` by minimizing over ``(x, u, w)`` jointly.

    The objective ``sum g_t + |1/gamma| sum rho_t(w_t)`` is jointly convex.
    Gaussian rate terms are quadratic, so one QP solves the problem. Other
    families use sequential quadratic models of the rate with a box trust
    region that is halved whenever a step fails to decrease the objective;
    iteration stops once the decrease falls below ``decrease_tol``.

    Args:
        problem: the :class:`~rsmpc.problem.ControlProblem`.
        gamma: negative risk parameter; values within 1e-9 of zero fall back
            to the certainty-equivalent plan.
        tol: QP tolerance.
        max_iter: cap on sequential iterations for non-Gaussian noise.
        breakdown_cap: bounds below ``-breakdown_cap`` count as breakdown.
        decrease_tol: stopping threshold on the objective decrease.
        divergence_window: breakdown is declared once this many consecutive
            decreases fail to shrink (the trust region doubles after each
            accepted step, so the objective is falling without bound).

    Returns:
        A :class:`SeekingResult`; euphoric breakdown is reported via ``status``.
    """
    gamma = float(gamma)
    if gamma > 0 and not is_neutral(gamma):
        raise ValueError("risk_seeking_plan needs gamma < 0; use risk_averse_ccp")
    ce_plan = certainty_equivalent_plan(problem, tol=tol)
    mean = problem.mean_noise()
    if is_neutral(gamma):
        return SeekingResult(gamma, mean, ce_plan.value, CONVERGED, ce_plan, 0, ce_plan.value)
    s = -1.0 / gamma
    free = ~np.concatenate([nm.degenerate for nm in problem.noise])
    if not free.any():
        return SeekingResult(gamma, mean, ce_plan.value, CONVERGED, ce_plan, 0, ce_plan.value)

    tpl = _template(problem)
    nv, nw = tpl.nv, int(free.sum())
    cols = np.flatnonzero(free)
    # dynamics rows: A x + B u - x' + w_free = -w_fixed
    Ew = sp.csr_matrix((np.ones(nw), (problem.n + cols, np.arange(nw))), shape=(tpl.eq_A.shape[0], nw))
    eq_A = sp.hstack([tpl.eq_A, Ew], format="csr")
    w_fixed = np.where(free, 0.0, mean)
    eq_b = np.concatenate([problem.x_init, -w_fixed])
    F_x = sp.hstack([tpl.in_F, sp.csr_matrix((tpl.in_F.shape[0], nw))], format="csr")
    gaussian = all(nm.family == "gaussian" for nm in problem.noise)

    def breakdown(msg, it, w=mean):
        return SeekingResult(gamma, w, -np.inf, BREAKDOWN, None, it, ce_plan.value, msg)

    def joint_qp(curv, lin_w, const, box=None):
        quad = sp.block_diag([tpl.quad, sp.diags(s * curv)], format="csr")
        lin = np.concatenate([tpl.lin, s * lin_w])
        F, h = F_x, tpl.in_h
        if box is not None:
            lo, hi = box
            I = sp.hstack([sp.csr_matrix((nw, nv)), sp.identity(nw, format="csr")], format="csr")
            up, dn = np.isfinite(hi), np.isfinite(lo)
            F = sp.vstack([F, I[up], -I[dn]], format="csr")
            h = np.concatenate([h, hi[up], -lo[dn]])
        return QpData(quad, lin, eq_A, eq_b, F, h, tpl.const + s * const)

    def finish(w_free, it, history, status=CONVERGED, msg=""):
        w = mean.copy()
        w[free] = w_free
        plan = prescient_solve(problem, w, tol=tol).require_optimal("risk-seeking plan")
        bound = plan.value + s * problem.total_rate(w)
        if bound < -breakdown_cap:
            return breakdown(f"bound {bound:.6g} below -{breakdown_cap:g}", it, w)
        return SeekingResult(gamma, w, bound, status, plan, it, ce_plan.value, msg, history)

    if gaussian:
        var = np.concatenate([nm.params["var"] for nm in problem.noise])[free]
        mu = mean[free]
        sol = solve_qp(joint_qp(1.0 / var, -mu / var, float(np.sum(mu**2 / (2 * var)))), tol=tol)
        if sol.status == qpmod.UNBOUNDED:
            return breakdown("joint problem is unbounded below", 1)
        if sol.status != qpmod.OPTIMAL:
            raise _solver_error(sol, "risk-seeking joint QP")
        if sol.value < -breakdown_cap:
            return breakdown(f"bound {sol.value:.6g} below -{breakdown_cap:g}", 1)
        return finish(sol.x[nv:], 1, [(1, sol.value)])

    # sequential quadratic models of the rate around the current w
    lo_dom, hi_dom = _rate_box(problem)
    lo_dom, hi_dom = lo_dom[free], hi_dom[free]
    with np.errstate(invalid="ignore"):
        inner_lo = np.where(np.isfinite(lo_dom), lo_dom + 1e-9 * (1.0 + np.abs(lo_dom)), -np.inf)
        inner_hi = np.where(np.isfinite(hi_dom), hi_dom - 1e-9 * (1.0 + np.abs(hi_dom)), np.inf)
    wf = mean[free].copy()

    def true_obj(wf_):
        w = mean.copy()
        w[free] = wf_
        p = prescient_solve(problem, w, tol=tol)
        if p.status != qpmod.OPTIMAL:
            return np.inf
        return p.value + s * problem.total_rate(w)

    current = true_obj(wf)
    history = [(0, current)]
    radius = np.maximum(1.0, np.abs(wf))
    gains = []
    it = 0
    for it in range(1, max_iter + 1):
        w_full = mean.copy()
        w_full[free] = wf
        _, g, H = _rate_model(problem, w_full, free)
        g, H = g[free], H[free]
        # quadratic model of rho about wf: 0.5 H d^2 + g d
        lin_w = g - H * wf
        const = 0.0
        while True:
            lo = np.maximum(wf - radius, inner_lo)
            hi = np.minimum(wf + radius, inner_hi)
            sol = solve_qp(joint_qp(H, lin_w, const, box=(lo, hi)), tol=tol)
            if sol.status != qpmod.OPTIMAL:
                raise _solver_error(sol, f"risk-seeking SQP iteration {it}")
            cand = sol.x[nv:]
            val = true_obj(cand)
            if val < -breakdown_cap:
                return breakdown(f"objective {val:.6g} below -{breakdown_cap:g}", it)
            if val <= current:
                break
            radius = radius * 0.5
            if np.max(radius) < 1e-12:
                cand, val = wf, current
                break
        decrease = current - val
        wf, current = cand, val
        history.append((it, current))
        if decrease < decrease_tol:
            return finish(wf, it, history)
        gains.append(decrease)
        recent = gains[-divergence_window:]
        if len(recent) == divergence_window and all(
            b >= a * (1.0 - 1e-6) for a, b in zip(recent, recent[1:])
        ):
            return breakdown(f"objective decreased without shrinking for {divergence_window} iterations", it, mean)
        radius = np.minimum(radius * 2.0, np.maximum(1.0, np.abs(wf)) * 1e6)
    return finish(wf, it, history, STALLED, f"no convergence in {max_iter} iterations")


def _solver_error(sol, what):
    return SolverError(f"{what}: solver status {sol.status}", sol.status)
