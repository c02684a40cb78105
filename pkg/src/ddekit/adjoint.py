"""Backward adjoint integration for constant-lag DDEs with sampled losses.

Conventions
-----------
The co-state ``lam`` is the negative sensitivity of the loss to the state,
``lam(t) = -dJ/dx(t)``, held as a row vector with the same shape as the state.
Between samples it obeys

    lam'(t) = -lam(t) df/dx(t) - sum_i lam(t + tau_i) df/dy_i(t + tau_i)

with ``lam = 0`` beyond ``t1``, where ``y_i`` is the i-th delayed argument.
Crossing a sample time ``t_s`` backwards applies
``lam(t_s-) = lam(t_s+) - dl/dx(t_s)``. The gradients are

    dJ/dw     = -int lam df/dw dt
    dJ/dtau_i = +int lam df/dy_i x'(t - tau_i) dt

and both integrals ride along as extra states of the backward Runge-Kutta
sweep. The history is not parameterised, so its contribution is zero.

The stored co-state is piecewise smooth with jumps at sample nodes, so both
one-sided limits are kept at every node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DimensionError, DivergenceError
from .solver import (
    NODE_SNAP,
    DdeProblem,
    DenseTrajectory,
    combine,
    hermite,
    snap_to_grid,
    split_points,
    tableau,
)


@dataclass(frozen=True)
class LossSpec:
    """Mean squared error at grid-aligned sample times.

    ``targets`` has shape ``(n_samples, *batch, n_observed)``. The loss is the
    mean over every sample, batch entry and observed coordinate, so the state
    gradient at a sample is ``2 * residual / targets.size``.
    """

    sample_times: np.ndarray
    targets: np.ndarray
    observed: tuple[int, ...] | None = None

    def __post_init__(self):
        times = np.asarray(self.sample_times, dtype=np.float64).ravel()
        targets = np.asarray(self.targets, dtype=np.float64)
        if times.size == 0:
            raise ConfigurationError("loss needs at least one sample time")
        if np.any(np.diff(times) <= 0):
            raise ConfigurationError("sample times must be strictly increasing")
        if targets.shape[0] != times.size:
            raise DimensionError("targets need one entry per sample time")
        object.__setattr__(self, "sample_times", times)
        object.__setattr__(self, "targets", targets)
        if self.observed is not None:
            object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))

    def node_indices(self, traj: DenseTrajectory) -> np.ndarray:
        idx = snap_to_grid(self.sample_times, traj.t0, traj.dt, traj.n_steps)
        if idx[0] == 0:
            raise ConfigurationError("sample times must lie strictly after t0")
        return idx

    def _observed(self, width, observation=None):
        obs = observation if observation is not None else self.observed
        obs = tuple(range(width)) if obs is None else tuple(obs)
        if not obs or any(i < 0 or i >= width for i in obs):
            raise ConfigurationError(f"invalid observation indices {obs}")
        return list(obs)

    def predictions(self, fwd: DenseTrajectory, observation=None) -> np.ndarray:
        idx = self.node_indices(fwd)
        obs = self._observed(fwd.states.shape[-1], observation)
        pred = fwd.states[idx][..., obs]
        if pred.shape != self.targets.shape:
            raise DimensionError(f"predictions {pred.shape} vs targets {self.targets.shape}")
        return pred

    def state_gradients(self, fwd: DenseTrajectory, observation=None):
        """``{node index: dl/dx}`` with the shape of one state."""
        idx = self.node_indices(fwd)
        obs = self._observed(fwd.states.shape[-1], observation)
        resid = self.predictions(fwd, observation) - self.targets
        scale = 2.0 / self.targets.size
        out = {}
        for r, n in enumerate(idx):
            g = np.zeros(fwd.states.shape[1:])
            g[..., obs] = scale * resid[r]
            out[int(n)] = g
        return out


def loss_eval(fwd: DenseTrajectory, loss: LossSpec, observation=None) -> float:
    resid = loss.predictions(fwd, observation) - loss.targets
    return float(np.mean(resid * resid))


@dataclass(frozen=True)
class AdjointRun:
    t0: float
    dt: float
    lam_plus: np.ndarray     # lam(t_n+), bottom value of interval [t_n, t_n+1]
    lam_minus: np.ndarray    # lam(t_n-), top value of interval [t_n-1, t_n]
    dlam_plus: np.ndarray
    dlam_minus: np.ndarray
    grad_weights: np.ndarray
    grad_delays: np.ndarray
    grad_history: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.lam_plus.shape[0] - 1

    @property
    def t1(self) -> float:
        return self.t0 + self.n_steps * self.dt

    def value(self, t: float, side: int = 1) -> np.ndarray:
        """Co-state at ``t``; at a node ``side=-1`` gives the left limit.

        Zero beyond ``t1`` and at ``t1`` from the right.
        """
        n = self.n_steps
        u = (t - self.t0) / self.dt
        m = math.floor(u)
        th = u - m
        if th > 1.0 - NODE_SNAP:
            m, th = m + 1, 0.0
        node = th < NODE_SNAP
        if node:
            if m > n or (m == n and side >= 0):
                return np.zeros(self.lam_plus.shape[1:])
            return self.lam_minus[m] if side < 0 else self.lam_plus[m]
        if m >= n:
            return np.zeros(self.lam_plus.shape[1:])
        return hermite(self.lam_plus[m], self.lam_minus[m + 1],
                       self.dlam_plus[m], self.dlam_minus[m + 1], self.dt, th)


def backward_breakpoints(t0, t1, dt, delays, jump_nodes, knots=()) -> np.ndarray:
    """Discontinuities of the backward right-hand side.

    ``lam(t + tau_i)`` jumps where ``t + tau_i`` is a sample time, and the
    delay-gradient integrand jumps with ``x'(t - tau_i)`` at ``t0 + tau_i``
    and at history knots shifted by ``tau_i``.
    """
    pts = [t0 + tau for tau in delays]
    pts.extend(g + tau for g in knots if g < t0 for tau in delays)
    for nidx in jump_nodes:
        ts = t0 + nidx * dt
        pts.extend(ts - tau for tau in delays)
    pts = np.unique(np.asarray(pts, dtype=np.float64))
    return pts[(pts > t0) & (pts < t1)]


def backward_adjoint(problem: DdeProblem, fwd: DenseTrajectory, loss: LossSpec,
                     vjp: Callable, method: str | None = None, observation=None) -> AdjointRun:
    """Integrate the co-state from ``t1`` to ``t0`` and accumulate gradients.

    ``vjp(t, x, delayed, v)`` must return ``(v df/dx, [v df/dy_i], v df/dw)``
    for the vector field at ``(t, x, delayed)``.
    """
    return backward_sweep(problem, fwd, loss.state_gradients(fwd, observation), vjp, method)


def backward_sweep(problem: DdeProblem, fwd: DenseTrajectory, jumps: dict,
                   vjp: Callable, method: str | None = None) -> AdjointRun:
    """Same as :func:`backward_adjoint` with the loss given as ``{node: dl/dx}``."""
    c, a, b = tableau(method or fwd.method)
    n, dt, t0 = fwd.n_steps, fwd.dt, fwd.t0
    if problem.n_steps != n or abs(problem.dt - dt) > 0 or problem.t0 != t0:
        raise ConfigurationError("forward trajectory does not match the problem grid")
    delays = problem.delays
    k = len(delays)
    t1 = t0 + n * dt

    shape = fwd.states.shape[1:]
    lam_plus = np.zeros((n + 1,) + shape)
    lam_minus = np.zeros_like(lam_plus)
    dlam_plus = np.zeros_like(lam_plus)
    dlam_minus = np.zeros_like(lam_plus)
    run = AdjointRun(t0, dt, lam_plus, lam_minus, dlam_plus, dlam_minus,
                     np.zeros(0), np.zeros(k))
    xv, xd = fwd.value, fwd.derivative

    # ``side`` selects one-sided limits for stages sitting on a breakpoint:
    # -1 approaches from below, +1 from above, 0 is an interior point.
    def rhs(s, lam, side=0, with_grads=True):
        x = xv(s)
        ys = [xv(s - tau) for tau in delays]
        gx, gys, gp = vjp(s, x, ys, lam)
        dlam = -gx
        for i, tau in enumerate(delays):
            u = s + tau
            lu = run.value(u, side)
            if not lu.any():
                continue
            xu = xv(u)
            yu = [xv(u - tj) for tj in delays]
            _, gyu, _ = vjp(u, xu, yu, lu)
            dlam = dlam - gyu[i]
        if not with_grads:
            return dlam, None, None
        dtau = np.array([-np.sum(gys[i] * xd(s - tau, side)) for i, tau in enumerate(delays)])
        return dlam, np.asarray(gp, dtype=np.float64), dtau

    def substep(s0, lam, h, first):
        kl, kw, kt = [], [], []
        for j, cj in enumerate(c):
            if j == 0 and first is not None:
                dl, dw, dtau = first
            else:
                ls = lam if j == 0 else combine(lam, h, a[j], kl)
                side = -1 if cj == 0.0 else (1 if cj == 1.0 else 0)
                dl, dw, dtau = rhs(s0 + cj * h, ls, side)
            kl.append(dl)
            kw.append(dw)
            kt.append(dtau)
        zw = np.zeros_like(kw[0])
        return combine(lam, h, b, kl), combine(zw, h, b, kw), combine(np.zeros(k), h, b, kt)

    breaks = backward_breakpoints(t0, t1, dt, delays, sorted(jumps), fwd.history.knots())

    def on_break(t):
        j = np.searchsorted(breaks, t)
        return any(abs(breaks[q] - t) <= NODE_SNAP * dt for q in (j - 1, j) if 0 <= q < breaks.size)

    if n in jumps:
        lam_minus[n] = lam_plus[n] - jumps[n]
    gw = None
    gtau = np.zeros(k)
    lam = lam_minus[n]
    for m in range(n, 0, -1):
        tm = t0 + m * dt
        first = rhs(tm, lam, -1)
        dlam_minus[m] = first[0]
        if m < n and m not in jumps and not on_break(tm):
            dlam_plus[m] = first[0]
        tb = t0 + (m - 1) * dt
        cuts = split_points(breaks, tb, tm, dt)[::-1]
        edges = [tm] + cuts + [tb]
        for e0, e1 in zip(edges[:-1], edges[1:]):
            lam, dgw, dgt = substep(e0, lam, e1 - e0, first if e0 == tm else None)
            gw = dgw if gw is None else gw + dgw
            gtau = gtau + dgt
        if not np.all(np.isfinite(lam)):
            raise DivergenceError("non-finite co-state during backward integration", tb)
        lam_plus[m - 1] = lam
        if (m - 1) in jumps or on_break(tb):
            dlam_plus[m - 1] = rhs(tb, lam, 1, with_grads=False)[0]
        if (m - 1) in jumps:
            lam = lam - jumps[m - 1]
        lam_minus[m - 1] = lam
    dlam_plus[0] = rhs(t0, lam, 1, with_grads=False)[0]
    dlam_minus[0] = rhs(t0, lam, -1, with_grads=False)[0]
    if gw is None:
        gw = np.zeros(0)
    return AdjointRun(t0, dt, lam_plus, lam_minus, dlam_plus, dlam_minus, gw, gtau)
