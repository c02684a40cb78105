"""Fixed-step explicit Runge-Kutta integration of constant-lag DDEs.

The solved trajectory keeps its node states together with the vector field at
every node, so a cubic Hermite interpolant gives values and derivatives at any
past time. States may carry leading batch axes; every operation is applied
elementwise, so a batch of independent trajectories sharing a grid and the
same delays integrates in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DivergenceError, OutOfRangeError

# (nodes c, lower-triangular rows a, weights b)
TABLEAUX = {
    "euler": ((0.0,), ((),), (1.0,)),
    "rk2": ((0.0, 0.5), ((), (0.5,)), (0.0, 1.0)),
    "rk4": (
        (0.0, 0.5, 0.5, 1.0),
        ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0),
    ),
}

# Offsets (in units of dt) below which a time is treated as sitting on a node.
NODE_SNAP = 1e-12
GRID_TOL = 1e-9


def tableau(method: str):
    try:
        return TABLEAUX[method]
    except KeyError:
        raise ConfigurationError(f"unknown method {method!r}; choose from {sorted(TABLEAUX)}") from None


def combine(x, dt, coeffs, ks):
    """``x + dt * sum(c_j k_j)`` skipping zero coefficients, in a fixed order."""
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        acc = c * k if acc is None else acc + c * k
    if acc is None:
        return x
    return x + dt * acc


def hermite(y0, y1, f0, f1, h, th):
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * y0 + (th3 - 2 * th2 + th) * h * f0
            + (-2 * th3 + 3 * th2) * y1 + (th3 - th2) * h * f1)


def hermite_deriv(y0, y1, f0, f1, h, th):
    th2 = th * th
    return ((6 * th2 - 6 * th) * (y0 - y1) / h + (3 * th2 - 4 * th + 1) * f0
            + (3 * th2 - 2 * th) * f1)


@dataclass(frozen=True)
class HistoryFunction:
    """State on ``t <= t0``: a constant, or a linearly interpolated table."""

    kind: str
    value: np.ndarray | None = None
    grid: np.ndarray | None = None
    values: np.ndarray | None = None

    @classmethod
    def constant(cls, value) -> "HistoryFunction":
        return cls("constant", value=np.array(value, dtype=np.float64, ndmin=1))

    @classmethod
    def tabulated(cls, grid, values) -> "HistoryFunction":
        grid = np.asarray(grid, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ConfigurationError("history grid must be strictly increasing with >= 2 points")
        if values.shape[0] != grid.size:
            raise ConfigurationError("history values must have one row per grid point")
        return cls("tabulated", grid=grid, values=values)

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self.value
        g, v = self.grid, self.values
        if t <= g[0]:
            return v[0]
        if t >= g[-1]:
            return v[-1]
        j = int(np.searchsorted(g, t, side="left")) - 1
        w = (t - g[j]) / (g[j + 1] - g[j])
        return v[j] + w * (v[j + 1] - v[j])

    def derivative(self, t: float, side: int = -1) -> np.ndarray:
        """Slope of the table; at a grid point ``side`` picks the left or right segment."""
        if self.kind == "constant":
            return np.zeros_like(self.value)
        g, v = self.grid, self.values
        j = int(np.searchsorted(g, t, side="left" if side < 0 else "right")) - 1
        if j < 0 or j >= g.size - 1:
            return np.zeros_like(v[0])
        return (v[j + 1] - v[j]) / (g[j + 1] - g[j])

    def knots(self) -> np.ndarray:
        """Times where the history's derivative may jump."""
        return np.zeros(0) if self.kind == "constant" else self.grid


@dataclass(frozen=True)
class DdeProblem:
    vector_field: Callable  # (t, x, [x(t - tau_i) ...]) -> dx/dt
    delays: tuple[float, ...]
    state_dim: int
    t0: float
    t1: float
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(float(d) for d in self.delays))
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.t1 > self.t0:
            raise ConfigurationError("t1 must exceed t0")
        for tau in self.delays:
            if not tau >= self.dt:
                raise ConfigurationError(f"delay {tau!r} is smaller than the step dt={self.dt!r}")
        steps = (self.t1 - self.t0) / self.dt
        if abs(steps - round(steps)) > GRID_TOL:
            raise ConfigurationError("(t1 - t0) must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt))


@dataclass(frozen=True)
class DenseTrajectory:
    t0: float
    dt: float
    states: np.ndarray
    node_derivatives: np.ndarray
    history: HistoryFunction
    method: str = "rk4"
    _filled: list = field(default_factory=lambda: [None], repr=False, compare=False)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def t1(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.dt

    def _locate(self, t: float):
        """Return ``(m, theta)`` with theta in (0, 1), or ``(node, None)``."""
        u = (t - self.t0) / self.dt
        m = math.floor(u)
        th = u - m
        if th < NODE_SNAP:
            node = m
        elif th > 1.0 - NODE_SNAP:
            node = m + 1
        else:
            node = None
        n = self.n_steps if self._filled[0] is None else self._filled[0]
        if node is not None:
            if node > n:
                raise OutOfRangeError(f"t={t!r} is beyond the solved range")
            return node, None
        if m + 1 > n:
            raise OutOfRangeError(f"t={t!r} is beyond the solved range")
        return m, th

    def value(self, t: float) -> np.ndarray:
        if t <= self.t0:
            return self.history(t)
        m, th = self._locate(t)
        if th is None:
            return self.states[m]
        s, d = self.states, self.node_derivatives
        return hermite(s[m], s[m + 1], d[m], d[m + 1], self.dt, th)

    def derivative(self, t: float, side: int = -1) -> np.ndarray:
        """Left-continuous derivative; ``side=+1`` at ``t0`` gives the solution side."""
        if abs(t - self.t0) <= NODE_SNAP * self.dt:
            return self.node_derivatives[0] if side > 0 else self.history.derivative(self.t0)
        if t <= self.t0:
            return self.history.derivative(t, side)
        m, th = self._locate(t)
        d = self.node_derivatives
        if th is None:
            return d[m]
        s = self.states
        return hermite_deriv(s[m], s[m + 1], d[m], d[m + 1], self.dt, th)


def eval_traj(traj: DenseTrajectory, t: float) -> np.ndarray:
    return traj.value(float(t))


def eval_traj_derivative(traj: DenseTrajectory, t: float) -> np.ndarray:
    return traj.derivative(float(t))


def split_points(breaks: np.ndarray, ta: float, tb: float, dt: float) -> list[float]:
    """Breakpoints strictly inside ``(ta, tb)``, ascending; ``breaks`` must be sorted."""
    lo = np.searchsorted(breaks, ta + NODE_SNAP * dt, side="right")
    hi = np.searchsorted(breaks, tb - NODE_SNAP * dt, side="left")
    return [float(v) for v in breaks[lo:hi]]


def forward_breakpoints(t0: float, delays: Sequence[float], knots=()) -> np.ndarray:
    """Times where a delayed argument loses smoothness: ``t0 + tau`` and history knots shifted by ``tau``."""
    pts = [t0 + tau for tau in delays]
    pts.extend(g + tau for g in knots if g < t0 for tau in delays)
    return np.unique(np.asarray(pts, dtype=np.float64))


def rk_substep(f, s0, x, h, c, a, b, first=None):
    """One explicit RK step of size ``h`` (negative for backward sweeps)."""
    ks = []
    for j, cj in enumerate(c):
        if j == 0 and first is not None:
            ks.append(first)
            continue
        xs = x if j == 0 else combine(x, h, a[j], ks)
        ks.append(f(s0 + cj * h, xs))
    return combine(x, h, b, ks), ks


def integrate(problem: DdeProblem, history: HistoryFunction, method: str = "rk4") -> DenseTrajectory:
    """Step from ``t0`` to ``t1`` on the fixed grid.

    A step that contains a point ``t0 + tau_i`` is split there, so the
    derivative jump inherited from the history never falls inside an RK stage
    pattern; node storage is unaffected.
    """
    c, a, b = tableau(method)
    vf = problem.vector_field
    n, dt, t0 = problem.n_steps, problem.dt, problem.t0
    delays = problem.delays
    x0 = np.array(history(t0), dtype=np.float64)
    if x0.shape[-1] != problem.state_dim:
        raise ConfigurationError(f"history has width {x0.shape[-1]}, expected {problem.state_dim}")
    states = np.empty((n + 1,) + x0.shape)
    derivs = np.empty_like(states)
    states[0] = x0
    traj = DenseTrajectory(t0, dt, states, derivs, history, method)
    lookup = traj.value
    breaks = forward_breakpoints(t0, delays, history.knots())

    def f(s, x):
        return np.asarray(vf(s, x, [lookup(s - tau) for tau in delays]), dtype=np.float64)

    for i in range(n):
        # Lookups need nodes up to i; node i's derivative is written first.
        traj._filled[0] = i
        t = t0 + i * dt
        x = states[i]
        k0 = f(t, x)
        derivs[i] = k0
        tn = t0 + (i + 1) * dt
        cuts = split_points(breaks, t, tn, dt)
        if not cuts:
            xn, _ = rk_substep(f, t, x, dt, c, a, b, first=k0)
        else:
            edges = [t] + cuts + [tn]
            xn = x
            for e0, e1 in zip(edges[:-1], edges[1:]):
                xn, _ = rk_substep(f, e0, xn, e1 - e0, c, a, b, first=k0 if e0 == t else None)
        if not np.all(np.isfinite(xn)):
            raise DivergenceError("non-finite state during forward integration", tn)
        states[i + 1] = xn
    traj._filled[0] = n
    derivs[n] = f(t0 + n * dt, states[n])
    traj._filled[0] = None
    states.flags.writeable = False
    derivs.flags.writeable = False
    return traj


def integrate_ode(field_fn: Callable, x0, t0: float, t1: float, dt: float, method: str = "rk4") -> np.ndarray:
    """Plain fixed-step ODE path ``x' = field_fn(t, x)``; returns node states."""
    c, a, b = tableau(method)
    steps = (t1 - t0) / dt
    if abs(steps - round(steps)) > GRID_TOL:
        raise ConfigurationError("(t1 - t0) must be an integer multiple of dt")
    n = int(round(steps))
    x = np.array(x0, dtype=np.float64)
    out = np.empty((n + 1,) + x.shape)
    out[0] = x
    def f(s, xs):
        return np.asarray(field_fn(s, xs), dtype=np.float64)

    for i in range(n):
        t = t0 + i * dt
        x, _ = rk_substep(f, t, x, dt, c, a, b)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite state during ODE integration", t + dt)
        out[i + 1] = x
    return out


def snap_to_grid(times: Sequence[float], t0: float, dt: float, n_steps: int) -> np.ndarray:
    """Map sample times to node indices; off-grid times are a configuration error."""
    idx = []
    for t in np.atleast_1d(np.asarray(times, dtype=np.float64)):
        u = (t - t0) / dt
        m = int(round(u))
        if abs(u - m) > GRID_TOL or m < 0 or m > n_steps:
            raise ConfigurationError(f"sample time {t!r} is not on the solver grid")
        idx.append(m)
    return np.asarray(idx, dtype=np.int64)
