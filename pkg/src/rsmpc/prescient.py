"""The prescient planning problem: optimal control for a known noise path.

The decision vector is ``(x_0, ..., x_T, u_0, ..., u_{T-1})``. Equality rows
are ordered as ``x_0 = x_init`` (n rows) followed by the dynamics of each
period written as ``A x_t + B u_t - x_{t+1} = -w_t``. With the solver's dual
convention this makes the dynamics multipliers exactly ``dJ_pr / dw``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import qp as qpmod
from .errors import SolverError
from .qp import QpData, solve_qp

DEFAULT_TOL = 1e-8


@dataclass
class PrescientSolution:
    """Optimal value and trajectories of the prescient problem at ``w``."""

    value: float
    x_traj: np.ndarray  # (T+1, n)
    u_traj: np.ndarray  # (T, m)
    lam: np.ndarray  # (T, n); subgradient of J_pr with respect to w
    nu: np.ndarray  # (n,); multiplier of x_0 = x_init
    w: np.ndarray  # (T, n)
    status: str
    kkt_residuals: dict
    iterations: int
    infeasible_periods: tuple = ()

    @property
    def ok(self):
        return self.status == qpmod.OPTIMAL

    def require_optimal(self, what="prescient problem"):
        if not self.ok:
            detail = ""
            if self.infeasible_periods:
                detail = f" (constraints of periods {list(self.infeasible_periods)} involved)"
            raise SolverError(f"{what}: solver status {self.status}{detail}", self.status)
        return self


class _Template:
    """w-independent part of the prescient QP for one problem."""

    def __init__(self, problem):
        T, n, m = problem.T, problem.n, problem.m
        nx = n * (T + 1)
        nv = nx + m * T
        self.T, self.n, self.m, self.nx, self.nv = T, n, m, nx, nv

        def xcols(t):
            return np.arange(t * n, (t + 1) * n)

        def ucols(t):
            return nx + np.arange(t * m, (t + 1) * m)

        Pr, Pc, Pv = [], [], []
        lin = np.zeros(nv)
        const = problem.terminal.const_off
        Fr, Fc, Fv, hs = [], [], [], []
        self.ineq_period = []
        row = 0

        def add_cost(cols, cost):
            nonlocal row
            Q = 2.0 * cost.quad
            ii, jj = np.nonzero(Q)
            Pr.extend(cols[ii])
            Pc.extend(cols[jj])
            Pv.extend(Q[ii, jj])
            lin[cols] += cost.lin
            F = cost.ineq_F
            if F.shape[0]:
                ii, jj = np.nonzero(F)
                Fr.extend(row + ii)
                Fc.extend(cols[jj])
                Fv.extend(F[ii, jj])
                hs.append(cost.ineq_h)
                row += F.shape[0]

        for t in range(T):
            cols = np.concatenate([xcols(t), ucols(t)])
            start = row
            add_cost(cols, problem.stage[t])
            const += problem.stage[t].const_off
            self.ineq_period.extend([t] * (row - start))
        start = row
        add_cost(xcols(T), problem.terminal)
        self.ineq_period.extend([T] * (row - start))

        Er, Ec, Ev = [], [], []
        eye = np.arange(n)
        Er.extend(eye)
        Ec.extend(xcols(0))
        Ev.extend(np.ones(n))
        for t in range(T):
            r0 = n + t * n
            At, Bt = problem.A[t], problem.B[t]
            ii, jj = np.nonzero(At)
            Er.extend(r0 + ii)
            Ec.extend(xcols(t)[jj])
            Ev.extend(At[ii, jj])
            ii, jj = np.nonzero(Bt)
            Er.extend(r0 + ii)
            Ec.extend(ucols(t)[jj])
            Ev.extend(Bt[ii, jj])
            Er.extend(r0 + eye)
            Ec.extend(xcols(t + 1))
            Ev.extend(-np.ones(n))

        self.quad = sp.csr_matrix((Pv, (Pr, Pc)), shape=(nv, nv))
        self.lin = lin
        self.const = const
        self.eq_A = sp.csr_matrix((Ev, (Er, Ec)), shape=(n * (T + 1), nv))
        self.in_F = sp.csr_matrix((Fv, (Fr, Fc)), shape=(row, nv))
        self.in_h = np.concatenate(hs) if hs else np.zeros(0)

    def qp(self, x_init, w):
        eq_b = np.concatenate([x_init, -np.asarray(w, dtype=float).reshape(-1)])
        return QpData(
            self.quad, self.lin, self.eq_A, eq_b, self.in_F, self.in_h, self.const,
            meta={"T": self.T, "n": self.n, "m": self.m},
        )


_templates = weakref.WeakKeyDictionary()


def _template(problem):
    tpl = _templates.get(problem)
    if tpl is None:
        tpl = _templates[problem] = _Template(problem)
    return tpl


def _check_w(problem, w):
    w = np.asarray(w, dtype=float)
    if w.size != problem.n * problem.T:
        raise ValueError(f"noise vector has {w.size} entries, expected n*T = {problem.n * problem.T}")
    return w.reshape(problem.T, problem.n)


def assemble_qp(problem, w):
    """Prescient QP for the stacked noise vector ``w`` (length n*T)."""
    w = _check_w(problem, w)
    return _template(problem).qp(problem.x_init, w)


def prescient_solve(problem, w, tol=DEFAULT_TOL, max_iter=100):
    """Solve the prescient problem at ``w`` and return a :class:`PrescientSolution`.

    ``lam[t]`` is the multiplier of the period-``t`` dynamics, oriented so that
    ``J_pr(w + d) >= J_pr(w) + lam . d``.
    """
    w = _check_w(problem, w)
    tpl = _template(problem)
    sol = solve_qp(tpl.qp(problem.x_init, w), tol=tol, max_iter=max_iter)
    T, n, m, nx = tpl.T, tpl.n, tpl.m, tpl.nx
    x = sol.x[:nx].reshape(T + 1, n)
    u = sol.x[nx:].reshape(T, m)
    periods = ()
    if sol.status == qpmod.INFEASIBLE and sol.certificate is not None and sol.certificate.size:
        involved = sol.certificate > 1e-6 * sol.certificate.max()
        periods = tuple(sorted({tpl.ineq_period[i] for i in np.flatnonzero(involved)}))
    return PrescientSolution(
        value=sol.value,
        x_traj=x,
        u_traj=u,
        lam=sol.y[n:].reshape(T, n),
        nu=sol.y[:n].copy(),
        w=w.copy(),
        status=sol.status,
        kkt_residuals=sol.residuals,
        iterations=sol.iterations,
        infeasible_periods=periods,
    )
