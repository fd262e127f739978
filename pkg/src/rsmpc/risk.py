"""Monte Carlo estimation of the risk operator and the scalar risk bound.

The risk operator is ``R_g(z) = (1/g) log E exp(g z)``, with ``R_0(z) = E z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import BreakdownError, DomainError

NEUTRAL_GAMMA = 1e-9
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_SEED = 20_231_017
BREAKDOWN_CAP = 1e12
_CHUNK_ENTRIES = 4_000_000


def is_neutral(gamma):
    """True if ``gamma`` is treated as zero."""
    return abs(gamma) < NEUTRAL_GAMMA


@dataclass(frozen=True)
class RiskEstimate:
    """Estimate of ``R_gamma`` with a 95% percentile-bootstrap interval."""

    gamma: float
    value: float
    ci_low: float
    ci_high: float
    n_samples: int

    @property
    def ci_width(self):
        return self.ci_high - self.ci_low


def _risk_value(costs, gamma):
    if is_neutral(gamma):
        return float(np.mean(costs))
    return float((logsumexp(gamma * costs) - np.log(costs.size)) / gamma)


def risk_mc(costs, gamma, n_boot=BOOTSTRAP_RESAMPLES, seed=BOOTSTRAP_SEED):
    """Estimate ``R_gamma`` from realized costs.

    Args:
        costs: 1-D array of sampled costs.
        gamma: risk parameter; ``|gamma| < 1e-9`` gives the sample mean.
        n_boot: number of bootstrap resamples.
        seed: seed of the bootstrap generator (fixed so results are reproducible).

    Returns:
        A :class:`RiskEstimate`. The interval always contains ``value``.
    """
    costs = np.asarray(costs, dtype=float).reshape(-1)
    if costs.size == 0:
        raise ValueError("costs must be nonempty")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite")
    gamma = float(gamma)
    value = _risk_value(costs, gamma)
    N = costs.size
    if np.ptp(costs) == 0.0 or N == 1:
        return RiskEstimate(gamma, value, value, value, N)

    # resample the transformed values; the statistic is monotone in their mean
    if is_neutral(gamma):
        shift, e = 0.0, costs
    else:
        shift = float(np.max(gamma * costs))
        e = np.exp(gamma * costs - shift)
    rng = np.random.default_rng(seed)
    means = np.empty(n_boot)
    rows = max(1, _CHUNK_ENTRIES // N)
    for start in range(0, n_boot, rows):
        k = min(rows, n_boot - start)
        idx = rng.integers(0, N, size=(k, N))
        means[start:start + k] = e[idx].mean(axis=1)
    if is_neutral(gamma):
        stats = means
    else:
        stats = (np.log(means) + shift) / gamma
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return RiskEstimate(gamma, value, float(min(lo, value)), float(max(hi, value)), N)


@dataclass
class ScalarBound:
    """Result of :func:`risk_bound_scalar`.

    ``history`` holds ``(k, z_k, bound_k)`` tuples; ``status`` is ``converged``
    or ``max_iter``.
    """

    gamma: float
    value: float
    z: np.ndarray
    history: list = field(default_factory=list)
    status: str = "converged"


def risk_bound_scalar(f, grad, model, gamma, hess=None, z0=None, max_iter=200,
                      tol=1e-12, breakdown_cap=BREAKDOWN_CAP):
    """Lower bound ``(1/gamma) sup_z (gamma f(z) - rho(z))`` on ``R_gamma(f(w))``.

    For ``gamma > 0`` the supremum of a difference of convex functions is
    approached by linearizing ``f`` and maximizing in closed form,
    ``z <- cgf_grad(gamma * grad f(z))``; every iterate gives a valid bound and
    the bounds never decrease. For ``gamma < 0`` the problem is a convex
    minimization of ``f(z) - rho(z)/gamma`` and is solved to optimality: by
    damped Newton when ``hess`` is supplied, by L-BFGS-B otherwise.

    Args:
        f: convex function of a ``model.dim`` vector.
        grad: returns a subgradient of ``f``.
        model: the :class:`~rsmpc.noise.NoiseModel` of the argument.
        gamma: risk parameter.
        hess: optional Hessian of ``f`` (used for ``gamma < 0``).
        z0: starting point; defaults to ``E w``.
        max_iter: iteration cap.
        tol: stop once the bound improves by less than this.
        breakdown_cap: bound magnitude treated as divergence.

    Returns:
        A :class:`ScalarBound`.

    Raises:
        BreakdownError: neurotic (``gamma > 0``) or euphoric (``gamma < 0``)
            divergence, or a linearization leaving the CGF domain.
    """
    gamma = float(gamma)
    mean = model.mean
    z = mean.copy() if z0 is None else np.array(z0, dtype=float).reshape(-1)
    if is_neutral(gamma):
        v = float(f(mean))
        return ScalarBound(gamma, v, mean, [(0, mean, v)])
    if gamma > 0:
        return _bound_averse(f, grad, model, gamma, z, max_iter, tol, breakdown_cap)
    return _bound_seeking(f, grad, hess, model, gamma, z, max_iter, tol, breakdown_cap)


def _bound_averse(f, grad, model, gamma, z, max_iter, tol, cap):
    bound = float(f(z)) - model.rate(z) / gamma
    history = [(0, z.copy(), bound)]
    for k in range(1, max_iter + 1):
        g = np.asarray(grad(z), dtype=float).reshape(-1)
        try:
            z_new, rho = model.rate_at_dual(gamma * g)
        except DomainError as exc:
            raise BreakdownError(
                f"gamma*subgradient left the CGF domain: {exc}", kind="neurotic", index=exc.index
            ) from exc
        new = float(f(z_new)) - rho / gamma
        if not np.isfinite(new) or new > cap:
            raise BreakdownError(f"bound exceeded {cap:g} at iteration {k}", kind="neurotic")
        history.append((k, z_new.copy(), new))
        gain = new - bound
        z, bound = z_new, max(bound, new)
        if gain < tol:
            return ScalarBound(gamma, bound, z, history)
    return ScalarBound(gamma, bound, z, history, status="max_iter")


def _bound_seeking(f, grad, hess, model, gamma, z, max_iter, tol, cap):
    s = -1.0 / gamma  # objective f + s * rho, s > 0
    fixed = model.degenerate
    free = ~fixed
    z = z.copy()
    z[fixed] = model.mean[fixed]

    def obj(zz):
        return float(f(zz)) + s * model.rate(zz)

    history = [(0, z.copy(), obj(z))]
    if not free.any():
        return ScalarBound(gamma, history[0][2], z, history)

    if hess is None:
        lo, hi = model.rate_domain()
        span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
        bounds = [
            (lo[i] + 1e-12 * span[i] if np.isfinite(lo[i]) else None,
             hi[i] - 1e-12 * span[i] if np.isfinite(hi[i]) else None)
            for i in np.flatnonzero(free)
        ]

        def fun(zf):
            zz = z.copy()
            zz[free] = zf
            val = obj(zz)
            if val < -cap:
                raise BreakdownError(f"bound fell below {-cap:g}", kind="euphoric")
            g = np.asarray(grad(zz), dtype=float) + s * model.rate_grad(zz)
            return val, g[free]

        res = minimize(fun, z[free], jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter * 50, "ftol": 1e-15, "gtol": 1e-12})
        z[free] = res.x
        value = obj(z)
        history.append((res.nit, z.copy(), value))
        if value < -cap:
            raise BreakdownError(f"bound fell below {-cap:g}", kind="euphoric")
        return ScalarBound(gamma, value, z, history, "converged" if res.success else "max_iter")

    value = history[0][2]
    for k in range(1, max_iter + 1):
        g = (np.asarray(grad(z), dtype=float) + s * model.rate_grad(z))[free]
        H = np.atleast_2d(np.asarray(hess(z), dtype=float))[np.ix_(free, free)]
        H = H + np.diag(s * model.rate_hess(z)[free])
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -g
        decrement = -float(g @ step)
        if decrement < 0:  # not a descent direction; fall back to gradient
            step, decrement = -g, float(g @ g)
        t = 1.0
        while True:
            trial = z.copy()
            trial[free] += t * step
            val = obj(trial)
            if val <= value - 0.25 * t * decrement or t < 1e-12:
                break
            t *= 0.5
        if val < -cap:
            raise BreakdownError(f"bound fell below {-cap:g} at iteration {k}", kind="euphoric")
        gain = value - val
        if gain < 0:
            break
        z, value = trial, val
        history.append((k, z.copy(), value))
        if 0.5 * decrement < tol:
            return ScalarBound(gamma, value, z, history)
    return ScalarBound(gamma, value, z, history, status="max_iter")
