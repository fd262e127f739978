"""Exact linear-exponential-quadratic planning through one symmetric linear system.

For quadratic costs and Gaussian noise the stationarity conditions of

    J_pr(w) - rho(w) / gamma

over ``(x, u, w)`` are linear. Writing the dynamics as ``A x + B u - x' + w = 0``
with multiplier ``lam`` and the initial condition ``x_0 = x_init`` with
multiplier ``nu``, the optimal noise is ``w = mu + gamma * Sigma * lam`` and the
remaining unknowns solve

    [ 2 S    C' ] [ v   ]   [ -q                ]
    [ C      D  ] [ lam ] = [ -mu    ]
                  [ nu  ]   [ x_init ]

with ``v = (x, u)``, ``S`` the block-diagonal cost, ``C`` the stacked dynamics
and initial-condition rows and ``D = diag(gamma * Sigma, 0)``.

The problem is finite exactly when ``J_pr`` is strictly convex on the
feasible set and the inner problem in ``w`` has the right curvature: concave for
``gamma > 0``, convex for ``gamma < 0``. Both cases give the KKT matrix
``len(v)`` positive and ``len(lam) + len(nu)`` negative eigenvalues; by
Sylvester's law of inertia this is read off a Bunch-Kaufman factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import BreakdownError, DegeneracyError, ProblemError
from .risk import is_neutral

OK = "ok"
BREAKDOWN = "breakdown"


@dataclass
class LeqrSystem:
    """Assembled KKT system; see the module docstring for the layout."""

    K: np.ndarray
    rhs: np.ndarray
    gamma: float
    n: int
    m: int
    T: int
    sigma: np.ndarray  # (T, n) noise variances
    mu: np.ndarray  # (T, n) noise means

    @property
    def n_v(self):
        return self.n * (self.T + 1) + self.m * self.T

    @property
    def n_dual(self):
        return self.n * self.T + self.n


@dataclass
class LeqrResult:
    """Solution of :func:`leqr_kkt_solve`.

    ``inertia`` is ``(positive, negative, zero)`` eigenvalue counts of the KKT
    matrix; ``expected`` is the count required for a finite problem.
    """

    gamma: float
    status: str
    x: np.ndarray | None
    u: np.ndarray | None
    w: np.ndarray | None
    lam: np.ndarray | None
    nu: np.ndarray | None
    bound: float
    inertia: tuple
    expected: tuple
    kind: str | None = None

    def require_ok(self):
        if self.status != OK:
            raise BreakdownError(
                f"KKT inertia {self.inertia} differs from {self.expected} at gamma={self.gamma:g}",
                kind=self.kind,
            )
        return self


def _check_quadratic(problem):
    for t, st in enumerate(problem.stage):
        if st.ineq_F.shape[0]:
            raise ProblemError("LEQR needs unconstrained stage costs", t)
    if problem.terminal.ineq_F.shape[0]:
        raise ProblemError("LEQR needs an unconstrained terminal cost", problem.T)
    for t, nm in enumerate(problem.noise):
        if nm.family != "gaussian":
            raise ProblemError(f"LEQR needs Gaussian noise, got {nm.family}", t)


def assemble_leqr(problem, gamma):
    """Build the dense symmetric KKT matrix and right-hand side."""
    _check_quadratic(problem)
    T, n, m = problem.T, problem.n, problem.m
    nx = n * (T + 1)
    nv = nx + m * T
    nd = n * T + n
    S = np.zeros((nv, nv))
    q = np.zeros(nv)
    C = np.zeros((nd, nv))
    for t in range(T):
        cols = np.concatenate([np.arange(t * n, (t + 1) * n), nx + np.arange(t * m, (t + 1) * m)])
        S[np.ix_(cols, cols)] += problem.stage[t].quad
        q[cols] += problem.stage[t].lin
        r = slice(t * n, (t + 1) * n)
        C[r, t * n:(t + 1) * n] = problem.A[t]
        C[r, nx + t * m:nx + (t + 1) * m] = problem.B[t]
        C[r, (t + 1) * n:(t + 2) * n] = -np.eye(n)
    cols = np.arange(T * n, nx)
    S[np.ix_(cols, cols)] += problem.terminal.quad
    q[cols] += problem.terminal.lin
    C[n * T:, :n] = np.eye(n)

    sigma = np.array([nm.params["var"] for nm in problem.noise])
    mu = np.array([nm.mean for nm in problem.noise])
    D = np.zeros((nd, nd))
    D[: n * T, : n * T] = np.diag(gamma * sigma.reshape(-1))
    K = np.block([[2.0 * S, C.T], [C, D]])
    rhs = np.concatenate([-q, -mu.reshape(-1), problem.x_init])
    return LeqrSystem(K, rhs, float(gamma), n, m, T, sigma, mu)


def inertia(K, tol=None):
    """``(positive, negative, zero)`` eigenvalue counts of symmetric ``K``.

    Uses the block-diagonal factor of a Bunch-Kaufman ``LDL'`` decomposition;
    eigenvalues of ``D`` below ``tol`` in magnitude count as zero.
    """
    _, D, _ = sla.ldl(K, lower=True, hermitian=True)
    N = D.shape[0]
    eig = []
    i = 0
    while i < N:
        if i + 1 < N and D[i + 1, i] != 0.0:
            eig.extend(np.linalg.eigvalsh(D[i:i + 2, i:i + 2]))
            i += 2
        else:
            eig.append(D[i, i])
            i += 1
    eig = np.array(eig)
    if tol is None:
        tol = 1e-10 * max(1.0, float(np.max(np.abs(K))))
    return int(np.sum(eig > tol)), int(np.sum(eig < -tol)), int(np.sum(np.abs(eig) <= tol))


def leqr_kkt_solve(problem, gamma):
    """Solve the risk-sensitive planning problem exactly for quadratic-Gaussian data.

    Args:
        problem: a :class:`~rsmpc.problem.ControlProblem` with unconstrained
            quadratic costs and Gaussian noise, e.g. from ``lqr_problem``.
        gamma: risk parameter, nonzero (values within 1e-9 of zero give the
            certainty-equivalent plan).

    Returns:
        :class:`LeqrResult`. On breakdown ``status`` is ``breakdown`` and
        ``kind`` is ``neurotic`` (``gamma > 0``) or ``euphoric`` (``gamma < 0``).

    Raises:
        DegeneracyError: the prescient KKT matrix is singular, so the plan is not
            unique for any ``gamma``.
    """
    gamma = 0.0 if is_neutral(gamma) else float(gamma)
    sys = assemble_leqr(problem, gamma)
    nv, nd = sys.n_v, sys.n_dual
    expected = (nv, nd, 0)

    prescient = assemble_leqr(problem, 0.0)
    in0 = inertia(prescient.K)
    if in0[2]:
        raise DegeneracyError(f"prescient KKT matrix is singular (inertia {in0})")
    if in0 != expected:
        raise DegeneracyError(f"prescient problem is not strictly convex (inertia {in0})")

    got = inertia(sys.K)
    if got != expected:
        kind = "neurotic" if gamma > 0 else "euphoric"
        return LeqrResult(gamma, BREAKDOWN, None, None, None, None, None, np.inf if gamma > 0 else -np.inf,
                          got, expected, kind)

    sol = np.linalg.solve(sys.K, sys.rhs)
    T, n, m = sys.T, sys.n, sys.m
    nx = n * (T + 1)
    x = sol[:nx].reshape(T + 1, n)
    u = sol[nx:nv].reshape(T, m)
    lam = sol[nv:nv + n * T].reshape(T, n)
    nu = sol[nv + n * T:]
    w = sys.mu + gamma * sys.sigma * lam
    value = problem.cost(x, u)
    bound = value if gamma == 0.0 else value - problem.total_rate(w) / gamma
    return LeqrResult(gamma, OK, x, u, w, lam, nu, float(bound), got, expected)
