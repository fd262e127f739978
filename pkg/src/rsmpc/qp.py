"""Primal-dual interior-point solver for convex quadratic programs.

Problems have the form::

    minimize    1/2 v' quad v + lin' v + const
    subject to  eq_A v = eq_b
                in_F v <= in_h

The solver is an infeasible-start Mehrotra predictor-corrector method. The
reduced KKT system is factored densely for small problems and with a sparse
LU otherwise. When the main iteration fails to converge, a phase-I LP and a
recession-direction LP decide between ``infeasible``, ``unbounded`` and
``max_iter``.

Dual variables follow the Lagrangian ``f(v) + y'(eq_A v - eq_b) + z'(in_F v - in_h)``,
so ``-y`` is the sensitivity of the optimal value to ``eq_b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

DENSE_LIMIT = 400
_REG = 1e-11
_STEP_FRACTION = 0.995
_POLISH_FROM = 1e-6


@dataclass(eq=False)
class QpData:
    """Convex QP in standard form; matrices are stored as ``scipy.sparse`` CSR."""

    quad: sp.csr_matrix
    lin: np.ndarray
    eq_A: sp.csr_matrix
    eq_b: np.ndarray
    in_F: sp.csr_matrix
    in_h: np.ndarray
    const: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lin = np.asarray(self.lin, dtype=float).reshape(-1)
        nv = self.lin.size
        self.quad = sp.csr_matrix(self.quad, shape=(nv, nv)) if not sp.issparse(self.quad) else self.quad.tocsr()
        self.eq_A = _as_csr(self.eq_A, nv)
        self.in_F = _as_csr(self.in_F, nv)
        self.eq_b = np.asarray(self.eq_b, dtype=float).reshape(-1)
        self.in_h = np.asarray(self.in_h, dtype=float).reshape(-1)
        self.validate()

    @property
    def n_var(self):
        return self.lin.size

    def validate(self, check_rank=False):
        nv = self.n_var
        if self.quad.shape != (nv, nv):
            raise ValueError(f"quad has shape {self.quad.shape}, expected ({nv}, {nv})")
        if self.eq_A.shape != (self.eq_b.size, nv):
            raise ValueError(f"eq_A has shape {self.eq_A.shape}, expected ({self.eq_b.size}, {nv})")
        if self.in_F.shape != (self.in_h.size, nv):
            raise ValueError(f"in_F has shape {self.in_F.shape}, expected ({self.in_h.size}, {nv})")
        if check_rank and self.eq_b.size:
            rank = np.linalg.matrix_rank(self.eq_A.toarray())
            if rank < self.eq_b.size:
                raise ValueError(f"eq_A has {self.eq_b.size} rows but rank {rank}")

    def objective(self, v):
        return float(0.5 * v @ (self.quad @ v) + self.lin @ v + self.const)


def _as_csr(M, ncol):
    if M is None:
        return sp.csr_matrix((0, ncol))
    if sp.issparse(M):
        return M.tocsr()
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return sp.csr_matrix((0, ncol))
    return sp.csr_matrix(np.atleast_2d(M))


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    value: float
    iterations: int
    residuals: dict
    certificate: np.ndarray = None


class _Kkt:
    """Factorization of ``[[H, A'], [A, -reg I]]`` with one step of refinement."""

    def __init__(self, H, A, reg, dense):
        nv, ne = H.shape[0], A.shape[0]
        self.nv = nv
        if dense:
            H = H.toarray() if sp.issparse(H) else H
            Ad = A.toarray() if sp.issparse(A) else A
            K = np.block([[H, Ad.T], [Ad, np.zeros((ne, ne))]])
            self.K0 = K
            Kr = K.copy()
            Kr[np.diag_indices(nv)] += reg
            Kr[nv + np.arange(ne), nv + np.arange(ne)] -= reg
            self._lu = la.lu_factor(Kr, check_finite=False)
            self._solve = lambda r: la.lu_solve(self._lu, r, check_finite=False)
        else:
            K = sp.bmat([[H, A.T], [A, None]], format="csc")
            self.K0 = K
            D = sp.diags(np.concatenate([np.full(nv, reg), np.full(ne, -reg)]))
            lu = spla.splu((K + D).tocsc(), permc_spec="COLAMD")
            self._solve = lu.solve

    def solve(self, rhs):
        sol = self._solve(rhs)
        sol = sol + self._solve(rhs - self.K0 @ sol)
        return sol


def _factor(H, A, reg, dense):
    """KKT factorization, retried once with stronger regularization."""
    try:
        return _Kkt(H, A, reg, dense)
    except (RuntimeError, np.linalg.LinAlgError):
        return _Kkt(H, A, max(1e3 * reg, 1e-8), dense)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve_qp(qp, tol=1e-8, max_iter=100, _diagnose=True):
    """Solve ``qp``; returns a :class:`QpSolution` whose ``status`` is one of
    ``optimal``, ``infeasible``, ``unbounded`` or ``max_iter``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    nv, ne, ni = qp.n_var, qp.eq_b.size, qp.in_h.size
    P, q, A, b, G, h = qp.quad, qp.lin, qp.eq_A, qp.eq_b, qp.in_F, qp.in_h
    dense = nv + ne <= DENSE_LIMIT
    scale_b = 1.0 + max(np.max(np.abs(b), initial=0.0), np.max(np.abs(h), initial=0.0))
    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)

    if ni == 0:
        return _solve_equality_qp(qp, dense, tol)

    reg = _REG * (1.0 + abs(P).max() if P.nnz else 1.0)
    if dense:
        # small problems: sparse bookkeeping costs more than dense algebra
        P, A, G = P.toarray(), A.toarray(), G.toarray()
        Gt = G.T
    else:
        Gt = G.T.tocsr()

    # initial point: least-squares fit of the inequalities under the equalities
    kkt = _factor(P + Gt @ G, A, max(reg, 1e-8), dense)
    sol = kkt.solve(np.concatenate([-q + Gt @ h, b]))
    v = sol[:nv]
    y = sol[nv:]
    s = h - G @ v
    z = np.ones(ni)
    shift = max(0.0, -float(np.min(s))) + 1.0
    s = s + shift
    r_d = P @ v + q + A.T @ y + Gt @ z
    scale = max(1.0, np.sqrt(np.linalg.norm(r_d, np.inf)))
    z = z * scale

    best = None
    near = []  # iterates close enough to try the active-set polish from
    stall = 0
    last_merit = np.inf
    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        r_d = P @ v + q + A.T @ y + Gt @ z
        r_p = A @ v - b
        r_i = G @ v + s - h
        mu = float(s @ z) / ni
        pobj = qp.objective(v)
        pres = max(np.linalg.norm(r_p, np.inf) if ne else 0.0, np.linalg.norm(r_i, np.inf)) / scale_b
        dres = np.linalg.norm(r_d, np.inf) / scale_q
        gap = float(s @ z) / (1.0 + abs(pobj))
        residuals = {"primal": pres, "dual": dres, "gap": gap}
        merit = max(pres, dres, gap)
        if best is None or merit < best[0]:
            best = (merit, v.copy(), y.copy(), z.copy(), s.copy(), residuals)
        if merit <= _POLISH_FROM:
            near.append((v.copy(), y.copy(), z.copy(), s.copy()))
        if pres <= tol and dres <= tol and gap <= tol:
            status = OPTIMAL
            break
        if merit > 0.99 * last_merit:
            stall += 1
        else:
            stall = 0
        last_merit = min(last_merit, merit)
        if stall >= 10 or max(np.max(np.abs(v)), np.max(np.abs(z))) > 1e14:
            break

        W = z / s
        H = P + Gt @ (G * W[:, None]) if dense else P + Gt @ sp.diags(W) @ G
        try:
            kkt = _factor(H, A, reg, dense)
        except (RuntimeError, np.linalg.LinAlgError):
            break

        def newton(r_sz):
            t = (z * r_i - r_sz) / s
            sol = kkt.solve(np.concatenate([-r_d - Gt @ t, -r_p]))
            dv, dy = sol[:nv], sol[nv:]
            dz = W * (G @ dv) + t
            ds = -r_i - G @ dv
            return dv, dy, dz, ds

        dv, dy, dz, ds = newton(s * z)
        alpha = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / ni
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dv, dy, dz, ds = newton(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, _STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz)))
        v = v + alpha * dv
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(z))):
            break

    if status == OPTIMAL:
        near = [(v, y, z, s)]
    else:
        _, v, y, z, s, residuals = best
    # a stalled but nearly converged run can still be finished by polishing;
    # on degenerate LPs the active set is often clearer at earlier iterates
    for cand in reversed(near):
        polished = _polish(qp, *cand, dense)
        if polished is not None and max(polished[4].values()) <= min(tol, max(residuals.values())):
            v, y, z, s, residuals = polished
            status = OPTIMAL
            break
    if status != OPTIMAL and not qp.quad.nnz and max(residuals.values()) <= _POLISH_FROM:
        # degenerate LPs can jam the interior point near the optimum; finish with a simplex
        crossed = _lp_crossover(qp)
        if crossed is not None and max(crossed[4].values()) <= tol:
            v, y, z, s, residuals = crossed
            status = OPTIMAL
    if status == OPTIMAL:
        return QpSolution(v, y, z, s, OPTIMAL, qp.objective(v), it, residuals)

    cert = None
    if _diagnose:
        status, cert = _diagnose_failure(qp, tol)
    return QpSolution(v, y, z, s, status, qp.objective(v), it, residuals, cert)


def _polish(qp, v0, y0, z0, s0, dense):
    """Re-solve on the identified active set; ``None`` if the guess is rejected.

    Proximal iterative refinement handles singular but consistent systems,
    such as LPs whose optimal face is not a vertex.
    """
    P, q, A, b, G, h = qp.quad, qp.lin, qp.eq_A, qp.eq_b, qp.in_F, qp.in_h
    nv, ne = qp.n_var, qp.eq_b.size
    act = z0 > s0
    C = sp.vstack([A, G[act]], format="csr")
    d = np.concatenate([b, h[act]])
    nc = d.size
    delta = 1e-7
    try:
        kkt = _Kkt(P, C, delta, dense)
    except (RuntimeError, np.linalg.LinAlgError, ValueError):
        return None
    K0 = kkt.K0
    rhs = np.concatenate([-q, d])
    sol = np.concatenate([v0, y0, z0[act]])
    for _ in range(8):
        sol = sol + kkt._solve(rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    v, lam = sol[:nv], sol[nv:]
    y, za = lam[:ne], lam[ne:]
    scale_b = 1.0 + max(np.max(np.abs(b), initial=0.0), np.max(np.abs(h), initial=0.0))
    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)
    viol = np.max(G @ v - h, initial=-np.inf)
    if viol > 1e-11 * scale_b or (za.size and za.min() < -1e-11 * scale_q):
        return None
    z = np.zeros_like(z0)
    z[act] = np.maximum(za, 0.0)
    s = np.maximum(h - G @ v, 0.0)
    r_d = P @ v + q + A.T @ y + G.T @ z
    r_p = A @ v - b if ne else np.zeros(0)
    residuals = {
        "primal": max(float(np.linalg.norm(r_p, np.inf)) if ne else 0.0, max(viol, 0.0)) / scale_b,
        "dual": float(np.linalg.norm(r_d, np.inf)) / scale_q,
        "gap": float(s @ z) / (1.0 + abs(qp.objective(v))),
    }
    return v, y, z, s, residuals


def _lp_crossover(qp):
    """Solve an LP with HiGHS dual simplex; ``None`` unless it reports optimal."""
    A, b, G, h, q = qp.eq_A, qp.eq_b, qp.in_F, qp.in_h, qp.lin
    ne = b.size
    res = linprog(
        q, A_ub=G, b_ub=h, A_eq=A if ne else None, b_eq=b if ne else None,
        bounds=(None, None), method="highs-ds",
    )
    if res.status != 0:
        return None
    v = res.x
    # HiGHS marginals are sensitivities of the optimum, the negated multipliers here
    y = -res.eqlin.marginals if ne else np.zeros(0)
    z = np.maximum(-res.ineqlin.marginals, 0.0)
    s = np.maximum(h - G @ v, 0.0)
    scale_b = 1.0 + max(np.max(np.abs(b), initial=0.0), np.max(np.abs(h), initial=0.0))
    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)
    r_d = q + A.T @ y + G.T @ z
    r_p = A @ v - b if ne else np.zeros(0)
    viol = max(float(np.max(G @ v - h, initial=0.0)), 0.0)
    residuals = {
        "primal": max(float(np.linalg.norm(r_p, np.inf)) if ne else 0.0, viol) / scale_b,
        "dual": float(np.linalg.norm(r_d, np.inf)) / scale_q,
        "gap": float(s @ z) / (1.0 + abs(qp.objective(v))),
    }
    return v, y, z, s, residuals


def _solve_equality_qp(qp, dense, tol):
    nv, ne = qp.n_var, qp.eq_b.size
    P, q, A, b = qp.quad, qp.lin, qp.eq_A, qp.eq_b
    reg = _REG * (1.0 + (abs(P).max() if P.nnz else 1.0))
    kkt = _Kkt(P, A, reg, dense)
    sol = kkt.solve(np.concatenate([-q, b]))
    v, y = sol[:nv], sol[nv:]
    r_d = P @ v + q + A.T @ y
    r_p = A @ v - b
    residuals = {
        "primal": float(np.linalg.norm(r_p, np.inf)) / (1.0 + np.max(np.abs(b), initial=0.0)),
        "dual": float(np.linalg.norm(r_d, np.inf)) / (1.0 + np.max(np.abs(q), initial=0.0)),
        "gap": 0.0,
    }
    status = OPTIMAL if max(residuals.values()) <= tol else MAX_ITER
    cert = None
    if status != OPTIMAL:
        status, cert = _diagnose_failure(qp, tol)
    return QpSolution(v, y, np.zeros(0), np.zeros(0), status, qp.objective(v), 1, residuals, cert)


def _diagnose_failure(qp, tol):
    """Classify a non-converged QP with two auxiliary LPs."""
    nv, ne, ni = qp.n_var, qp.eq_b.size, qp.in_h.size
    # phase I: minimize t s.t. A v = b, G v - t <= h, t >= -1
    if ni:
        G1 = sp.bmat(
            [[qp.in_F, -np.ones((ni, 1))], [sp.csr_matrix((1, nv)), -np.ones((1, 1))]], format="csr"
        )
        h1 = np.concatenate([qp.in_h, [1.0]])
        A1 = sp.hstack([qp.eq_A, sp.csr_matrix((ne, 1))], format="csr")
        c1 = np.zeros(nv + 1)
        c1[-1] = 1.0
        ph1 = solve_qp(QpData(sp.csr_matrix((nv + 1, nv + 1)), c1, A1, qp.eq_b, G1, h1), tol, 200, False)
        if ph1.status == OPTIMAL and ph1.x[-1] > 10 * tol * (1.0 + np.max(np.abs(qp.in_h))):
            zc = ph1.z[:ni]
            return INFEASIBLE, zc / max(np.sum(zc), 1e-300)
    # recession direction: d in null(quad), A d = 0, G d <= 0, |d| <= 1, minimize lin'd
    P = qp.quad.toarray() if nv <= 2000 else None
    if P is not None and np.any(P):
        U, sv, _ = np.linalg.svd(P)
        Z = U[:, sv <= 1e-10 * max(sv.max(), 1.0)]
    else:
        Z = np.eye(nv)
    k = Z.shape[1]
    if k == 0:
        return MAX_ITER, None
    Zs = sp.csr_matrix(Z)
    box = sp.vstack([sp.eye(k), -sp.eye(k)])
    G2 = sp.vstack([qp.in_F @ Zs, box], format="csr") if ni else box.tocsr()
    h2 = np.concatenate([np.zeros(ni), np.ones(2 * k)])
    A2 = (qp.eq_A @ Zs).tocsr()
    ray = solve_qp(QpData(sp.csr_matrix((k, k)), Z.T @ qp.lin, A2, np.zeros(ne), G2, h2), tol, 200, False)
    if ray.status == OPTIMAL and ray.value < -1e3 * tol * (1.0 + np.max(np.abs(qp.lin))):
        return UNBOUNDED, Z @ ray.x
    return MAX_ITER, None


# --- plain-text dump -----------------------------------------------------------

_BLOCKS = ("quad", "lin", "eq_A", "eq_b", "in_F", "in_h")


def dump_qp(qp, path):
    """Write ``qp`` as matrix-market-style triplets, one block after another.

    Each block starts with ``% block <name> <rows> <cols> <nnz>`` followed by
    ``i j value`` lines (1-based indices).
    """
    with open(path, "w") as fh:
        fh.write("%%QpData triplets v1\n")
        fh.write(f"% const {float(qp.const)!r}\n")
        for name in _BLOCKS:
            M = getattr(qp, name)
            M = sp.coo_matrix(M.reshape(-1, 1) if isinstance(M, np.ndarray) else M)
            fh.write(f"% block {name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
            for i, j, val in zip(M.row, M.col, M.data):
                fh.write(f"{i + 1} {j + 1} {float(val)!r}\n")


def load_qp(path):
    """Inverse of :func:`dump_qp`."""
    blocks, const = {}, 0.0
    current = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("%%"):
                continue
            if line.startswith("% const"):
                const = float(line.split()[2])
            elif line.startswith("% block"):
                _, _, name, r, c, _ = line.split()
                current = name
                blocks[name] = (int(r), int(c), [], [], [])
            elif line.strip():
                i, j, val = line.split()
                rows, cols, vals = blocks[current][2:]
                rows.append(int(i) - 1)
                cols.append(int(j) - 1)
                vals.append(float(val))
    out = {}
    for name, (r, c, rows, cols, vals) in blocks.items():
        M = sp.coo_matrix((vals, (rows, cols)), shape=(r, c)).tocsr()
        out[name] = M.toarray().reshape(-1) if name in ("lin", "eq_b", "in_h") else M
    return QpData(const=const, **out)
