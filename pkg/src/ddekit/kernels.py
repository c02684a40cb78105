"""Batched forward and adjoint sweeps for MLP vector fields.

Two interchangeable backends implement the same algorithm:

* ``compiled``: the Cython extension ``ddekit._core``.
* ``python``: the reference path in :mod:`ddekit.solver` and :mod:`ddekit.adjoint`.

The compiled backend is chosen at import when the extension loads; setting
``DDEKIT_BACKEND=python`` forces the fallback. Both expect a constant history
equal to the initial state of each trajectory.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adjoint import backward_breakpoints, backward_sweep
from .errors import ConfigurationError, DimensionError, DivergenceError
from .nn import MlpSpec, mlp_forward, mlp_vjp
from .solver import (
    NODE_SNAP,
    DdeProblem,
    DenseTrajectory,
    HistoryFunction,
    forward_breakpoints,
    integrate,
    tableau,
)

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_ACT_CODES = {"tanh": 0, "relu": 1, "identity": 2}


def available_backends() -> list[str]:
    return (["compiled"] if _core is not None else []) + ["python"]


def default_backend() -> str:
    want = os.environ.get("DDEKIT_BACKEND", "").strip().lower()
    if want == "python" or _core is None:
        return "python"
    if want not in ("", "compiled"):
        raise ConfigurationError(f"DDEKIT_BACKEND={want!r}; expected 'compiled' or 'python'")
    return "compiled"


BACKEND = default_backend()


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``DDEKIT_THREADS``, else 1."""
    if threads is None:
        raw = os.environ.get("DDEKIT_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigurationError(f"DDEKIT_THREADS={raw!r} is not an integer") from None
    if threads < 1:
        raise ConfigurationError("thread count must be >= 1")
    return threads


@dataclass(frozen=True)
class FieldSpec:
    """``x' = MLP([x, x(t - tau_1), ..., x(t - tau_k), (t)])``."""

    mlp: MlpSpec
    state_dim: int
    n_delays: int
    use_time: bool = False

    def __post_init__(self):
        want = self.state_dim * (self.n_delays + 1) + int(self.use_time)
        if self.mlp.n_in != want:
            raise DimensionError(f"MLP input width {self.mlp.n_in}, field needs {want}")
        if self.mlp.n_out != self.state_dim:
            raise DimensionError(f"MLP output width {self.mlp.n_out}, state has {self.state_dim}")


@dataclass(frozen=True)
class BatchSolution:
    t0: float
    dt: float
    method: str
    x0: np.ndarray          # (B, d)
    states: np.ndarray      # (N+1, B, d)
    derivs: np.ndarray      # (N+1, B, d)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def batch_size(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.dt


def _cut_ranges(breaks, t0, dt, n):
    edges = t0 + np.arange(n + 1) * dt
    lo = np.searchsorted(breaks, edges[:-1] + NODE_SNAP * dt, side="right")
    hi = np.searchsorted(breaks, edges[1:] - NODE_SNAP * dt, side="left")
    return lo.astype(np.int64), np.maximum(hi, lo).astype(np.int64)


def _padded(breaks):
    # the extension takes a pointer to element 0, so never hand it an empty array
    return np.ascontiguousarray(np.append(breaks, np.inf), dtype=np.float64)


def _chunks(B, threads):
    parts = min(threads, B)
    bounds = np.linspace(0, B, parts + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


def _check_delays(delays, dt):
    delays = np.ascontiguousarray(delays, dtype=np.float64).ravel()
    if np.any(delays < dt * (1.0 - 1e-12)):
        raise ConfigurationError("delays must be at least one step dt")
    return delays


def _python_field(field: FieldSpec, params):
    d = field.state_dim

    def inputs(t, x, ys):
        cols = [x, *ys]
        if field.use_time:
            cols.append(np.full(x.shape[:-1] + (1,), t))
        return np.concatenate(cols, axis=-1)

    def vf(t, x, ys):
        return mlp_forward(field.mlp, params, inputs(t, x, ys))

    def vjp(t, x, ys, v):
        gin, gp = mlp_vjp(field.mlp, params, inputs(t, x, ys), v)
        return gin[..., :d], [gin[..., d * (i + 1):d * (i + 2)] for i in range(len(ys))], gp

    return vf, vjp


def _problem(field, params, delays, t0, dt, n_steps):
    vf, vjp = _python_field(field, params)
    return DdeProblem(vf, tuple(delays), field.state_dim, t0, t0 + n_steps * dt, dt), vjp


def solve_batch(field: FieldSpec, params, delays, x0, t0: float, dt: float, n_steps: int,
                method: str = "rk4", backend: str | None = None,
                threads: int | None = None) -> BatchSolution:
    """Integrate ``B`` trajectories with constant histories ``x0``; ``params`` are MLP weights only."""
    backend = backend or BACKEND
    c, a, b = tableau(method)
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.shape != (field.mlp.n_params,):
        raise DimensionError(f"expected {field.mlp.n_params} weights, got {params.shape}")
    delays = _check_delays(delays, dt)
    if delays.size != field.n_delays:
        raise DimensionError(f"field expects {field.n_delays} delays, got {delays.size}")
    x0 = np.ascontiguousarray(np.atleast_2d(x0), dtype=np.float64)
    if x0.ndim != 2 or x0.shape[1] != field.state_dim:
        raise DimensionError(f"initial states must be (B, {field.state_dim}), got {x0.shape}")
    if n_steps < 1:
        raise ConfigurationError("need at least one step")

    if backend == "python":
        problem, _ = _problem(field, params, delays, t0, dt, n_steps)
        traj = integrate(problem, HistoryFunction.constant(x0), method)
        return BatchSolution(t0, dt, method, x0, traj.states, traj.node_derivatives)
    if backend != "compiled" or _core is None:
        raise ConfigurationError(f"backend {backend!r} is not available")

    breaks = forward_breakpoints(t0, delays)
    lo, hi = _cut_ranges(breaks, t0, dt, n_steps)
    sizes = np.asarray(field.mlp.layer_sizes, dtype=np.intc)
    act = _ACT_CODES[field.mlp.activation]
    pad = _padded(breaks)

    def run(lo_hi):
        r0, r1 = lo_hi
        return _core.forward(params, sizes, act, delays, x0[r0:r1], float(t0), float(dt),
                             int(n_steps), c, a, b, pad, lo, hi, field.use_time)

    parts = _map(run, _chunks(x0.shape[0], resolve_threads(threads)))
    for _, _, step in parts:
        if step:
            raise DivergenceError("non-finite state during forward integration", t0 + step * dt)
    if len(parts) == 1:
        states, derivs = parts[0][0], parts[0][1]
    else:
        states = np.concatenate([p[0] for p in parts], axis=1)
        derivs = np.concatenate([p[1] for p in parts], axis=1)
    return BatchSolution(t0, dt, method, x0, states, derivs)


def _map(fn, items):
    if len(items) == 1:
        return [fn(items[0])]
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        return list(pool.map(fn, items))


def adjoint_batch(field: FieldSpec, params, delays, sol: BatchSolution, jump_nodes, jumps,
                  backend: str | None = None, threads: int | None = None):
    """Gradients of a loss given by its state derivatives at grid nodes.

    ``jump_nodes`` are strictly increasing node indices in ``1..N`` and
    ``jumps[s, b]`` is ``dJ/dx`` of trajectory ``b`` at node ``jump_nodes[s]``.
    Returns ``(dJ/dweights, dJ/ddelays)`` summed over the batch.
    """
    backend = backend or BACKEND
    c, a, b = tableau(sol.method)
    params = np.ascontiguousarray(params, dtype=np.float64)
    delays = _check_delays(delays, sol.dt)
    jump_nodes = np.asarray(jump_nodes, dtype=np.int64).ravel()
    jumps = np.ascontiguousarray(jumps, dtype=np.float64)
    B, n = sol.batch_size, sol.n_steps
    if jumps.shape != (jump_nodes.size, B, field.state_dim):
        raise DimensionError(f"jumps must be (S, B, d), got {jumps.shape}")
    if jump_nodes.size and (jump_nodes[0] < 1 or jump_nodes[-1] > n or np.any(np.diff(jump_nodes) <= 0)):
        raise ConfigurationError("jump nodes must be increasing indices in 1..N")
    t0, dt = sol.t0, sol.dt

    if backend == "python":
        problem, vjp = _problem(field, params, delays, t0, dt, n)
        traj = DenseTrajectory(t0, dt, sol.states, sol.derivs,
                               HistoryFunction.constant(sol.x0), sol.method)
        jd = {int(m): jumps[s] for s, m in enumerate(jump_nodes)}
        run = backward_sweep(problem, traj, jd, vjp, sol.method)
        gw = run.grad_weights if run.grad_weights.size else np.zeros(field.mlp.n_params)
        return gw, run.grad_delays
    if backend != "compiled" or _core is None:
        raise ConfigurationError(f"backend {backend!r} is not available")

    breaks = backward_breakpoints(t0, t0 + n * dt, dt, delays, jump_nodes)
    lo, hi = _cut_ranges(breaks, t0, dt, n)
    node_t = t0 + np.arange(n + 1) * dt
    on_break = np.zeros(n + 1, dtype=np.uint8)
    if breaks.size:
        j = np.searchsorted(breaks, node_t)
        left = breaks[np.clip(j - 1, 0, breaks.size - 1)]
        right = breaks[np.clip(j, 0, breaks.size - 1)]
        near = np.minimum(np.abs(left - node_t), np.abs(right - node_t))
        on_break[near <= NODE_SNAP * dt] = 1
    jump_index = np.full(n + 1, -1, dtype=np.int64)
    jump_index[jump_nodes] = np.arange(jump_nodes.size)
    sizes = np.asarray(field.mlp.layer_sizes, dtype=np.intc)
    act = _ACT_CODES[field.mlp.activation]
    pad = _padded(breaks)

    def run(lo_hi):
        r0, r1 = lo_hi
        states, derivs, x0 = sol.states, sol.derivs, sol.x0
        if (r0, r1) != (0, B):
            states = np.ascontiguousarray(states[:, r0:r1])
            derivs = np.ascontiguousarray(derivs[:, r0:r1])
            x0 = np.ascontiguousarray(x0[r0:r1])
        return _core.adjoint(params, sizes, act, delays, np.ascontiguousarray(states),
                             np.ascontiguousarray(derivs), x0, float(t0), float(dt), c, a, b,
                             pad, lo, hi, on_break, jump_index,
                             np.ascontiguousarray(jumps[:, r0:r1]), field.use_time)

    parts = _map(run, _chunks(B, resolve_threads(threads)))
    gw = np.zeros(field.mlp.n_params)
    gtau = np.zeros(delays.size)
    for p in parts:  # fixed reduction order
        if p[4]:
            raise DivergenceError("non-finite co-state during backward integration")
        gw = gw + p[0]
        gtau = gtau + p[1]
    return gw, gtau
