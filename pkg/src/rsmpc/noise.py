"""Per-period noise distributions.

A :class:`NoiseModel` is a product of independent scalar distributions from
one family. Each model knows its cumulant generating function (CGF)
``c(y) = log E exp(w'y)``, the CGF gradient, the rate function (the Fenchel
conjugate of the CGF) and its gradient, and how to draw samples.

Supported families and their parameters (one value per coordinate):

===========  ====================  ==========================================
family       parameters            notes
===========  ====================  ==========================================
gaussian     ``mean``, ``var``     ``var == 0`` is a point mass at ``mean``
laplace      ``loc``, ``scale``    density ``exp(-|w - loc| / scale)``
uniform      ``low``, ``high``
poisson      ``rate``, ``shift``   ``w = N - shift`` with ``N ~ Poisson(rate)``
===========  ====================  ==========================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

FAMILIES = ("gaussian", "laplace", "uniform", "poisson")

_PARAM_NAMES = {
    "gaussian": ("mean", "var"),
    "laplace": ("loc", "scale"),
    "uniform": ("low", "high"),
    "poisson": ("rate", "shift"),
}

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 200
_TAYLOR = 0.1


# --- uniform helpers, in terms of z = half_width * y -------------------------

def _log_sinhc(z):
    """log(sinh(z) / z), accurate for all real z."""
    z = np.abs(np.asarray(z, dtype=float))
    out = np.empty_like(z)
    small = z < _TAYLOR
    large = z > 20.0
    mid = ~small & ~large
    z2 = z[small] ** 2
    out[small] = z2 * (1 / 6 + z2 * (-1 / 180 + z2 * (1 / 2835 + z2 * (-1 / 37800 + z2 / 467775))))
    zm = z[mid]
    out[mid] = np.log(np.sinh(zm) / zm)
    zl = z[large]
    out[large] = zl - math.log(2.0) + np.log1p(-np.exp(-2.0 * zl)) - np.log(zl)
    return out


def _langevin(z):
    """coth(z) - 1/z."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < _TAYLOR
    zs = z[small]
    z2 = zs**2
    out[small] = zs * (1 / 3 + z2 * (-1 / 45 + z2 * (2 / 945 + z2 * (-1 / 4725 + z2 * 2 / 93555))))
    zb = z[~small]
    out[~small] = 1.0 / np.tanh(zb) - 1.0 / zb
    return out


def _langevin_prime(z):
    """d/dz (coth(z) - 1/z) = 1/z^2 - 1/sinh(z)^2."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < _TAYLOR
    z2 = z[small] ** 2
    out[small] = 1 / 3 + z2 * (-1 / 15 + z2 * (2 / 189 + z2 * (-1 / 675 + z2 * 2 / 10395)))
    zb = z[~small]
    inv_sinh = np.where(np.abs(zb) > 700.0, 0.0, 1.0 / np.sinh(np.clip(zb, -700.0, 700.0)))
    out[~small] = 1.0 / zb**2 - inv_sinh**2
    return out


def _as_param(value, dim):
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.size == 1 and dim is not None and dim > 1:
        arr = np.full(dim, arr[0])
    return arr


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Independent product of scalar distributions from a single family.

    Build instances with the family constructors, e.g.
    ``NoiseModel.gaussian(mean=0.0, var=[1.0, 4.0])``.
    """

    family: str
    params: dict = field(repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        names = _PARAM_NAMES[self.family]
        if set(self.params) != set(names):
            raise ValueError(f"{self.family} needs parameters {names}")
        arrays = [np.array(self.params[k], dtype=float).reshape(-1) for k in names]
        dim = max(a.size for a in arrays)
        fixed = {}
        for k, a in zip(names, arrays):
            if a.size == 1:
                a = np.full(dim, a[0])
            if a.size != dim:
                raise ValueError(f"parameter {k!r} has length {a.size}, expected {dim}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {k!r} must be finite")
            a.setflags(write=False)
            fixed[k] = a
        object.__setattr__(self, "params", fixed)
        self._check_params()

    # --- constructors ---------------------------------------------------------

    @classmethod
    def gaussian(cls, mean=0.0, var=1.0, dim=None):
        return cls("gaussian", {"mean": _as_param(mean, dim), "var": _as_param(var, dim)})

    @classmethod
    def laplace(cls, loc=0.0, scale=1.0, dim=None):
        return cls("laplace", {"loc": _as_param(loc, dim), "scale": _as_param(scale, dim)})

    @classmethod
    def uniform(cls, low=-1.0, high=1.0, dim=None):
        return cls("uniform", {"low": _as_param(low, dim), "high": _as_param(high, dim)})

    @classmethod
    def poisson(cls, rate=1.0, shift=0.0, centered=False, dim=None):
        """Poisson counts minus ``shift``; ``centered=True`` sets ``shift = rate``."""
        rate = _as_param(rate, dim)
        shift = rate.copy() if centered else _as_param(shift, dim)
        return cls("poisson", {"rate": rate, "shift": shift})

    @classmethod
    def from_dict(cls, spec):
        spec = dict(spec)
        family = spec.pop("family")
        if family not in FAMILIES:
            raise ValueError(f"unknown noise family {family!r}")
        if family == "poisson":
            if spec.pop("centered", False):
                spec["shift"] = spec["rate"]
            spec.setdefault("shift", 0.0)
        return cls(family, spec)

    def to_dict(self):
        out = {"family": self.family}
        for k, v in self.params.items():
            out[k] = [float(t) for t in v]
        return out

    def _check_params(self):
        p = self.params
        if self.family == "gaussian":
            bad = np.flatnonzero(p["var"] < 0)
            what = "variance must be >= 0"
        elif self.family == "laplace":
            bad = np.flatnonzero(p["scale"] <= 0)
            what = "scale must be > 0"
        elif self.family == "uniform":
            bad = np.flatnonzero(p["low"] >= p["high"])
            what = "need low < high"
        else:
            bad = np.flatnonzero(p["rate"] <= 0)
            what = "rate must be > 0"
        if bad.size:
            raise DomainError(f"{self.family} coordinate {bad[0]}: {what}", index=int(bad[0]))

    # --- basic properties -----------------------------------------------------

    @property
    def dim(self):
        return next(iter(self.params.values())).size

    @property
    def mean(self):
        """E w."""
        p = self.params
        if self.family == "gaussian":
            return p["mean"].copy()
        if self.family == "laplace":
            return p["loc"].copy()
        if self.family == "uniform":
            return 0.5 * (p["low"] + p["high"])
        return p["rate"] - p["shift"]

    @property
    def degenerate(self):
        """Boolean mask of point-mass coordinates."""
        if self.family == "gaussian":
            return self.params["var"] == 0.0
        return np.zeros(self.dim, dtype=bool)

    def _vec(self, v, name):
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.shape != (self.dim,):
            raise ValueError(f"{name} has shape {arr.shape}, expected ({self.dim},)")
        return arr

    # --- cumulant generating function ----------------------------------------

    def cgf_coords(self, y):
        """Per-coordinate CGF values c_i(y_i) (``inf`` outside the domain)."""
        y = self._vec(y, "y")
        p = self.params
        if self.family == "gaussian":
            return p["mean"] * y + 0.5 * p["var"] * y**2
        if self.family == "laplace":
            by = p["scale"] * y
            inside = np.abs(by) < 1.0
            out = np.full(self.dim, np.inf)
            out[inside] = p["loc"][inside] * y[inside] - np.log1p(-by[inside] ** 2)
            return out
        if self.family == "uniform":
            mid = 0.5 * (p["low"] + p["high"])
            half = 0.5 * (p["high"] - p["low"])
            return mid * y + _log_sinhc(half * y)
        with np.errstate(over="ignore"):
            return p["rate"] * np.expm1(y) - p["shift"] * y

    def cgf(self, y):
        """c(y) = log E exp(w'y); ``inf`` where the expectation diverges."""
        return float(np.sum(self.cgf_coords(y)))

    def _check_cgf_interior(self, y):
        if self.family == "laplace":
            bad = np.flatnonzero(np.abs(self.params["scale"] * y) >= 1.0)
            if bad.size:
                i = int(bad[0])
                raise DomainError(
                    f"laplace CGF undefined at coordinate {i}: |y|={abs(y[i]):.6g} "
                    f">= 1/scale={1.0 / self.params['scale'][i]:.6g}",
                    index=i,
                )

    def cgf_grad(self, y):
        """Gradient of the CGF; equals E w at ``y = 0``."""
        y = self._vec(y, "y")
        self._check_cgf_interior(y)
        p = self.params
        if self.family == "gaussian":
            return p["mean"] + p["var"] * y
        if self.family == "laplace":
            b2 = p["scale"] ** 2
            return p["loc"] + 2.0 * b2 * y / (1.0 - b2 * y**2)
        if self.family == "uniform":
            mid = 0.5 * (p["low"] + p["high"])
            half = 0.5 * (p["high"] - p["low"])
            return mid + half * _langevin(half * y)
        return p["rate"] * np.exp(y) - p["shift"]

    def cgf_hess(self, y):
        """Diagonal of the CGF Hessian."""
        y = self._vec(y, "y")
        self._check_cgf_interior(y)
        p = self.params
        if self.family == "gaussian":
            return p["var"].copy()
        if self.family == "laplace":
            b2 = p["scale"] ** 2
            return 2.0 * b2 * (1.0 + b2 * y**2) / (1.0 - b2 * y**2) ** 2
        if self.family == "uniform":
            half = 0.5 * (p["high"] - p["low"])
            return half**2 * _langevin_prime(half * y)
        return p["rate"] * np.exp(y)

    # --- rate function --------------------------------------------------------

    def rate_coords(self, x):
        """Per-coordinate rate values rho_i(x_i)."""
        x = self._vec(x, "x")
        p = self.params
        if self.family == "gaussian":
            var = p["var"]
            d = x - p["mean"]
            out = np.empty(self.dim)
            pos = var > 0
            out[pos] = d[pos] ** 2 / (2.0 * var[pos])
            out[~pos] = np.where(d[~pos] == 0.0, 0.0, np.inf)
            return out
        if self.family == "poisson":
            lam = p["rate"]
            u = x + p["shift"]
            out = np.full(self.dim, np.inf)
            zero = u == 0.0
            out[zero] = lam[zero]
            pos = u > 0
            up = u[pos]
            out[pos] = up * np.log(up / lam[pos]) - up + lam[pos]
            return out
        return self.rate_numeric_coords(x)

    def rate(self, x):
        """rho(x) = sup_y (x'y - c(y)); ``inf`` outside the support's hull."""
        return float(np.sum(self.rate_coords(x)))

    def rate_numeric_coords(self, x):
        """Per-coordinate conjugate computed by safeguarded Newton on y."""
        x = self._vec(x, "x")
        lo, hi = self.rate_domain()
        out = np.empty(self.dim)
        for i in range(self.dim):
            if self.degenerate[i]:
                out[i] = 0.0 if x[i] == self.mean[i] else np.inf
                continue
            if not lo[i] < x[i] < hi[i]:
                out[i] = self._rate_boundary(i, x[i])
                continue
            y = self._dual_point(i, x[i])
            out[i] = x[i] * y - self._cgf_scalar(i, y)
        return out

    def rate_numeric(self, x):
        """Newton-based conjugate, independent of any closed form."""
        return float(np.sum(self.rate_numeric_coords(x)))

    def rate_domain(self):
        """Open interval (lo, hi) per coordinate on which rho is smooth and finite."""
        p = self.params
        d = self.dim
        if self.family == "gaussian":
            lo = np.where(self.degenerate, p["mean"], -np.inf)
            hi = np.where(self.degenerate, p["mean"], np.inf)
            return lo, hi
        if self.family == "laplace":
            return np.full(d, -np.inf), np.full(d, np.inf)
        if self.family == "uniform":
            return p["low"].copy(), p["high"].copy()
        return -p["shift"], np.full(d, np.inf)

    def _rate_boundary(self, i, xi):
        if self.family == "poisson" and xi == -self.params["shift"][i]:
            return float(self.params["rate"][i])
        return np.inf

    def _cgf_scalar(self, i, y):
        e = np.zeros(self.dim)
        e[i] = y
        return float(self.cgf_coords(e)[i])

    def _grad_hess_scalar(self, i, y):
        e = np.zeros(self.dim)
        e[i] = y
        return float(self.cgf_grad(e)[i]), float(self.cgf_hess(e)[i])

    def _dual_point(self, i, xi):
        """Solve c_i'(y) = xi by Newton with a bisection safeguard."""
        if self.family == "laplace":
            r = 1.0 / self.params["scale"][i]
            lo, hi = -r, r
        else:
            lo, hi = -np.inf, np.inf
        y = 0.0
        for _ in range(NEWTON_MAX_ITER):
            g, h = self._grad_hess_scalar(i, y)
            res = g - xi
            if abs(res) <= NEWTON_TOL * (1.0 + abs(xi)):
                return y
            if res > 0:
                hi = y
            else:
                lo = y
            step = y - res / h if h > 0 else np.nan
            if np.isfinite(step) and lo < step < hi:
                y = step
            elif np.isfinite(lo) and np.isfinite(hi):
                y = 0.5 * (lo + hi)
            elif np.isfinite(lo):
                y = 2.0 * lo + 1.0 if lo >= 0 else 0.0
            else:
                y = 2.0 * hi - 1.0 if hi <= 0 else 0.0
            if np.isfinite(lo) and np.isfinite(hi) and hi - lo <= 1e-15 * (1.0 + abs(y)):
                return y
        return y

    def rate_grad(self, x):
        """Gradient of the rate function: the inverse map of :meth:`cgf_grad`."""
        x = self._vec(x, "x")
        p = self.params
        lo, hi = self.rate_domain()
        if self.family == "gaussian":
            out = np.zeros(self.dim)
            deg = self.degenerate
            bad = np.flatnonzero(deg & (x != p["mean"]))
            if bad.size:
                i = int(bad[0])
                raise DomainError(f"coordinate {i} is a point mass at {p['mean'][i]}", index=i)
            out[~deg] = (x[~deg] - p["mean"][~deg]) / p["var"][~deg]
            return out
        bad = np.flatnonzero(~((lo < x) & (x < hi)))
        if bad.size:
            i = int(bad[0])
            raise DomainError(
                f"{self.family} rate gradient undefined at coordinate {i}: x={x[i]:.6g} "
                f"not in ({lo[i]:.6g}, {hi[i]:.6g})",
                index=i,
            )
        if self.family == "poisson":
            return np.log((x + p["shift"]) / p["rate"])
        return np.array([self._dual_point(i, x[i]) for i in range(self.dim)])

    def rate_hess(self, x):
        """Diagonal of the rate Hessian, 1 / c''(rho'(x)), on the domain interior."""
        y = self.rate_grad(x)
        if self.family == "gaussian":
            out = np.full(self.dim, np.inf)
            pos = ~self.degenerate
            out[pos] = 1.0 / self.params["var"][pos]
            return out
        return 1.0 / self.cgf_hess(y)

    def rate_at_dual(self, y):
        """Return ``(x, rho(x))`` for ``x = cgf_grad(y)`` via the Fenchel identity."""
        y = self._vec(y, "y")
        x = self.cgf_grad(y)
        rho = x * y - self.cgf_coords(y)
        # point-mass coordinates: x is the mean and the rate is exactly zero
        rho[self.degenerate] = 0.0
        return x, float(np.sum(rho))

    # --- sampling -------------------------------------------------------------

    def draw(self, rng, count):
        """``count`` draws using the generator ``rng``; shape (count, dim)."""
        p = self.params
        size = (count, self.dim)
        if self.family == "gaussian":
            return p["mean"] + np.sqrt(p["var"]) * rng.standard_normal(size)
        if self.family == "laplace":
            return rng.laplace(p["loc"], p["scale"], size=size)
        if self.family == "uniform":
            return rng.uniform(p["low"], p["high"], size=size)
        return rng.poisson(p["rate"], size=size).astype(float) - p["shift"]

    def sample(self, count, seed):
        """``count`` independent draws, deterministic in ``seed``."""
        if count < 1:
            raise ValueError("count must be >= 1")
        return self.draw(np.random.default_rng(seed), int(count))


# function-style aliases: cgf(model, y) etc.
cgf = NoiseModel.cgf
cgf_grad = NoiseModel.cgf_grad
rate = NoiseModel.rate
rate_grad = NoiseModel.rate_grad
sample = NoiseModel.sample


def laplace_rate_closed_form(model, x):
    """Closed-form Laplace conjugate, kept separate from the Newton path for checking."""
    x = model._vec(x, "x")
    b = model.params["scale"]
    d = x - model.params["loc"]
    y = np.zeros_like(d)
    nz = d != 0
    y[nz] = (np.sqrt(b[nz] ** 2 + d[nz] ** 2) - b[nz]) / (d[nz] * b[nz])
    return float(np.sum(d * y + np.log1p(-(b * y) ** 2)))
