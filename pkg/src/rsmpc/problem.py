"""Linear-convex stochastic control problems.

Dynamics are ``x[t+1] = A[t] x[t] + B[t] u[t] + w[t]`` for ``t = 0..T-1``.
Stage costs are convex quadratics on a polyhedron::

    g(z) = z' quad z + lin' z + const_off   if ineq_F z <= ineq_h
         = +inf                              otherwise

with ``z = (x, u)`` for the stage costs and ``z = x`` for the terminal cost.
Note that ``quad`` enters without a factor 1/2, so an LQR stage cost
``x'Qx + u'Ru`` has ``quad = blkdiag(Q, R)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProblemError
from .noise import NoiseModel

PSD_TOL = -1e-10
FEAS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class StageCost:
    """Convex quadratic cost restricted to a polyhedron."""

    quad: np.ndarray
    lin: np.ndarray
    const_off: float = 0.0
    ineq_F: np.ndarray = None
    ineq_h: np.ndarray = None

    def __post_init__(self):
        quad = np.atleast_2d(np.array(self.quad, dtype=float))
        k = quad.shape[0]
        lin = np.array(self.lin, dtype=float).reshape(-1) if self.lin is not None else np.zeros(k)
        F = np.zeros((0, k)) if self.ineq_F is None else np.array(self.ineq_F, dtype=float).reshape(-1, k)
        h = np.zeros(0) if self.ineq_h is None else np.array(self.ineq_h, dtype=float).reshape(-1)
        for a in (quad, lin, F, h):
            a.setflags(write=False)
        object.__setattr__(self, "quad", quad)
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "ineq_F", F)
        object.__setattr__(self, "ineq_h", h)
        object.__setattr__(self, "const_off", float(self.const_off))

    @property
    def size(self):
        return self.quad.shape[0]

    def validate(self, size, period=None):
        if self.quad.shape != (size, size):
            raise ProblemError(f"quad has shape {self.quad.shape}, expected ({size}, {size})", period)
        if self.lin.shape != (size,):
            raise ProblemError(f"lin has length {self.lin.size}, expected {size}", period)
        if self.ineq_F.shape[1] != size:
            raise ProblemError(f"ineq_F has {self.ineq_F.shape[1]} columns, expected {size}", period)
        if self.ineq_F.shape[0] != self.ineq_h.size:
            raise ProblemError(
                f"ineq_F has {self.ineq_F.shape[0]} rows but ineq_h has {self.ineq_h.size}", period
            )
        if not np.allclose(self.quad, self.quad.T, atol=1e-12, rtol=1e-10):
            raise ProblemError("quad is not symmetric", period)
        if size:
            eig = np.linalg.eigvalsh(self.quad).min()
            if eig < PSD_TOL * max(1.0, np.abs(self.quad).max()):
                raise ProblemError(f"quad is not PSD (min eigenvalue {eig:.3g})", period)

    def __call__(self, z, tol=FEAS_TOL):
        """Evaluate the cost at ``z``; ``inf`` if a constraint is violated by more than ``tol``."""
        z = np.asarray(z, dtype=float)
        if self.ineq_h.size:
            viol = self.ineq_F @ z - self.ineq_h
            if np.max(viol) > tol * (1.0 + np.max(np.abs(self.ineq_h))):
                return np.inf
        return float(z @ self.quad @ z + self.lin @ z + self.const_off)

    @classmethod
    def zero(cls, size):
        return cls(np.zeros((size, size)), np.zeros(size))


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Finite-horizon risk-sensitive linear-convex control problem."""

    A: tuple
    B: tuple
    x_init: np.ndarray
    stage: tuple
    terminal: StageCost
    noise: tuple
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        A = tuple(np.atleast_2d(np.array(a, dtype=float)) for a in self.A)
        B = tuple(np.atleast_2d(np.array(b, dtype=float)) for b in self.B)
        for a in A + B:
            a.setflags(write=False)
        x0 = np.array(self.x_init, dtype=float).reshape(-1)
        x0.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "x_init", x0)
        object.__setattr__(self, "stage", tuple(self.stage))
        object.__setattr__(self, "noise", tuple(self.noise))
        self.validate()

    @property
    def T(self):
        return len(self.A)

    @property
    def n(self):
        return self.x_init.size

    @property
    def m(self):
        return self.B[0].shape[1] if self.B else 0

    def validate(self):
        T, n = len(self.A), self.x_init.size
        if T < 1:
            raise ProblemError("horizon must be at least one period")
        if not (len(self.B) == len(self.stage) == len(self.noise) == T):
            raise ProblemError(
                f"per-period lists disagree: A={T}, B={len(self.B)}, "
                f"stage={len(self.stage)}, noise={len(self.noise)}"
            )
        m = self.B[0].shape[1]
        for t in range(T):
            if self.A[t].shape != (n, n):
                raise ProblemError(f"A has shape {self.A[t].shape}, expected ({n}, {n})", t)
            if self.B[t].shape != (n, m):
                raise ProblemError(f"B has shape {self.B[t].shape}, expected ({n}, {m})", t)
            if not isinstance(self.noise[t], NoiseModel):
                raise ProblemError("noise must be a NoiseModel", t)
            if self.noise[t].dim != n:
                raise ProblemError(f"noise has dimension {self.noise[t].dim}, expected {n}", t)
            self.stage[t].validate(n + m, t)
        self.terminal.validate(n, T)

    def tail(self, t, x_init=None):
        """The problem over periods ``t..T-1``, starting from ``x_init``."""
        if not 0 <= t < self.T:
            raise ValueError(f"tail index {t} outside [0, {self.T})")
        x0 = np.array(self.x_init if x_init is None else x_init, dtype=float).reshape(-1)
        if x0.shape != (self.n,):
            raise ProblemError(f"x_init has shape {x0.shape}, expected ({self.n},)")
        x0.setflags(write=False)
        meta = dict(self.meta)
        meta["offset"] = self.meta.get("offset", 0) + t
        # slices of a validated problem are valid; skip re-validation
        out = object.__new__(ControlProblem)
        for name, value in (
            ("A", self.A[t:]), ("B", self.B[t:]), ("x_init", x0), ("stage", self.stage[t:]),
            ("terminal", self.terminal), ("noise", self.noise[t:]), ("meta", meta),
        ):
            object.__setattr__(out, name, value)
        return out

    def mean_noise(self):
        """Stacked E w, length n*T."""
        return np.concatenate([nm.mean for nm in self.noise])

    def total_rate(self, w):
        """Sum of per-period rate functions at stacked ``w``."""
        w = np.asarray(w, dtype=float).reshape(self.T, self.n)
        return float(sum(nm.rate(w[t]) for t, nm in enumerate(self.noise)))

    def cost(self, x, u):
        """Total cost of trajectories ``x`` (T+1, n) and ``u`` (T, m)."""
        total = self.terminal(x[self.T])
        for t in range(self.T):
            total += self.stage[t](np.concatenate([x[t], u[t]]))
        return total

    def rollout(self, u, w):
        """States produced by inputs ``u`` (T, m) and noise ``w`` (T, n)."""
        x = np.empty((self.T + 1, self.n))
        x[0] = self.x_init
        for t in range(self.T):
            x[t + 1] = self.A[t] @ x[t] + self.B[t] @ u[t] + w[t]
        return x


def _per_period(value, T, name):
    """Accept one matrix or a length-T list of matrices."""
    try:
        arr = np.array(value, dtype=float)
    except ValueError:
        arr = None  # ragged: must be a per-period list
    if arr is not None and arr.ndim <= 2:
        return [np.atleast_2d(arr)] * T
    if arr is not None and arr.ndim != 3:
        raise ProblemError(f"{name}: cannot interpret array of shape {arr.shape}")
    if len(value) != T:
        raise ProblemError(f"{name}: list has length {len(value)}, expected {T}")
    return [np.atleast_2d(np.array(v, dtype=float)) for v in value]


def _stage_from_dict(d, size):
    quad = d.get("quad", np.zeros((size, size)))
    return StageCost(
        quad=np.atleast_2d(np.array(quad, dtype=float)),
        lin=d.get("lin", np.zeros(size)),
        const_off=d.get("const", 0.0),
        ineq_F=d.get("F"),
        ineq_h=d.get("h"),
    )


def build_problem(config):
    """Build a validated :class:`ControlProblem` from a plain-dict description.

    Matrices (``A``, ``B``), stage costs and noise models may each be given once
    (time invariant) or as a list with one entry per period.
    """
    try:
        T = int(config["T"])
        x_init = np.array(config["x_init"], dtype=float).reshape(-1)
    except KeyError as exc:
        raise ProblemError(f"missing field {exc.args[0]!r}") from None
    n = x_init.size
    A = _per_period(config["A"], T, "A")
    B = _per_period(config["B"], T, "B")
    for t in range(T):
        if A[t].shape != (n, n):
            raise ProblemError(f"A has shape {A[t].shape}, expected ({n}, {n})", t)
        if B[t].shape[0] != n:
            raise ProblemError(f"B has {B[t].shape[0]} rows, expected {n}", t)
    m = B[0].shape[1]

    stage_cfg = config.get("stage", {})
    stage_list = stage_cfg if isinstance(stage_cfg, list) else [stage_cfg] * T
    if len(stage_list) != T:
        raise ProblemError(f"stage list has length {len(stage_list)}, expected {T}")
    stage = []
    for t, d in enumerate(stage_list):
        try:
            s = _stage_from_dict(d, n + m)
        except ValueError as exc:
            raise ProblemError(str(exc), t) from None
        s.validate(n + m, t)
        stage.append(s)
    terminal = _stage_from_dict(config.get("terminal", {}), n)

    noise_cfg = config["noise"]
    noise_list = noise_cfg if isinstance(noise_cfg, list) else [noise_cfg] * T
    if len(noise_list) != T:
        raise ProblemError(f"noise list has length {len(noise_list)}, expected {T}")
    noise = []
    for t, d in enumerate(noise_list):
        try:
            noise.append(NoiseModel.from_dict(d))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProblemError(f"invalid noise parameters: {exc}", t) from None
    return ControlProblem(A=A, B=B, x_init=x_init, stage=stage, terminal=terminal, noise=noise)


def lqr_problem(A, B, Q, R, Sigma, T, x_init):
    """Time-invariant LQR problem with Gaussian noise ``N(0, Sigma)``.

    Stage cost ``x'Qx + u'Ru``, terminal cost ``x'Qx``. Only diagonal
    ``Sigma`` is supported.
    """
    A = np.atleast_2d(np.array(A, dtype=float))
    B = np.atleast_2d(np.array(B, dtype=float))
    Q = np.atleast_2d(np.array(Q, dtype=float))
    R = np.atleast_2d(np.array(R, dtype=float))
    n, m = B.shape
    Sigma = np.array(Sigma, dtype=float)
    if Sigma.ndim < 2:
        Sigma = np.diag(np.broadcast_to(Sigma.reshape(-1), (n,)).copy())
    if Sigma.shape != (n, n):
        raise ProblemError(f"Sigma has shape {Sigma.shape}, expected ({n}, {n})")
    if np.any(Sigma - np.diag(np.diag(Sigma))):
        raise ProblemError("only diagonal Sigma is supported")
    var = np.diag(Sigma).copy()
    if np.any(var <= 0):
        raise ProblemError("Sigma must be positive definite")
    quad = np.block([[Q, np.zeros((n, m))], [np.zeros((m, n)), R]])
    stage = StageCost(quad, np.zeros(n + m))
    noise = NoiseModel.gaussian(np.zeros(n), var)
    return ControlProblem(
        A=[A] * T,
        B=[B] * T,
        x_init=x_init,
        stage=[stage] * T,
        terminal=StageCost(Q, np.zeros(n)),
        noise=[noise] * T,
        meta={"kind": "lqr", "Q": Q, "R": R, "Sigma": Sigma},
    )


# --- battery -----------------------------------------------------------------

def tou_prices(T, h, night=15.0, peak=40.0, shoulder=25.0, start_hour=0.0):
    """Time-of-use price per period: ``night`` 21:00-6:00, ``peak`` 13:00-19:00."""
    hours = (start_hour + h * np.arange(T)) % 24.0
    prices = np.full(T, float(shoulder))
    prices[(hours >= 21.0) | (hours < 6.0)] = night
    prices[(hours >= 13.0) & (hours < 19.0)] = peak
    return prices


def daily_profile(T, h, breakpoints, start_hour=0.0):
    """Periodic piecewise-linear daily profile through ``(hour, value)`` breakpoints."""
    pts = sorted((float(a) % 24.0, float(b)) for a, b in breakpoints)
    hrs = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    hrs = np.concatenate([hrs - 24.0, hrs, hrs + 24.0])
    vals = np.concatenate([vals, vals, vals])
    t_hours = (start_hour + h * np.arange(T)) % 24.0
    return np.interp(t_hours, hrs, vals)


def battery_problem(prices, p_base, alpha, sigma, h, T, q_init, q_max, p_load_init=None):
    """Battery charge control with an auto-regressive uncertain net load.

    State ``(q, p_load)``, input ``(p_batt, p_grid)``. The stage cost is
    ``h * c[t] * p_grid`` subject to the load balance, grid non-negativity and
    the charge limits on the post-step charge ``q - h * p_batt``. The charge
    coordinate carries a zero-variance noise term.
    """
    prices = np.broadcast_to(np.array(prices, dtype=float), (T,))
    p_base = np.broadcast_to(np.array(p_base, dtype=float), (T,))
    if not 0.0 < alpha < 1.0:
        raise ProblemError(f"alpha must lie in (0, 1), got {alpha}")
    if q_max <= 0:
        raise ProblemError(f"q_max must be positive, got {q_max}")
    if not 0.0 <= q_init <= q_max:
        raise ProblemError(f"q_init={q_init} outside [0, {q_max}]")
    if h <= 0:
        raise ProblemError(f"h must be positive, got {h}")
    if sigma < 0:
        raise ProblemError(f"sigma must be non-negative, got {sigma}")
    if np.any(prices < 0):
        raise ProblemError("prices must be non-negative")
    if p_load_init is None:
        p_load_init = float(p_base[0])
    A = np.array([[1.0, 0.0], [0.0, alpha]])
    B = np.array([[-h, 0.0], [0.0, 0.0]])
    F = np.array(
        [
            [0.0, 1.0, -1.0, -1.0],  # p_load <= p_batt + p_grid
            [1.0, 0.0, -h, 0.0],  # q - h p_batt <= q_max
            [-1.0, 0.0, h, 0.0],  # q - h p_batt >= 0
            [0.0, 0.0, 0.0, -1.0],  # p_grid >= 0
        ]
    )
    g = np.array([0.0, q_max, 0.0, 0.0])
    stage, noise = [], []
    for t in range(T):
        stage.append(StageCost(np.zeros((4, 4)), [0.0, 0.0, 0.0, h * prices[t]], 0.0, F, g))
        noise.append(NoiseModel.gaussian([0.0, (1.0 - alpha) * p_base[t]], [0.0, sigma**2]))
    return ControlProblem(
        A=[A] * T,
        B=[B] * T,
        x_init=[q_init, p_load_init],
        stage=stage,
        terminal=StageCost.zero(2),
        noise=noise,
        meta={
            "kind": "battery",
            "prices": np.array(prices),
            "p_base": np.array(p_base),
            "alpha": alpha,
            "sigma": sigma,
            "h": h,
            "q_max": q_max,
        },
    )
