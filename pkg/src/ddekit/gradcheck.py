"""Adjoint gradients against central finite differences on small random models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NeuralDdeModel, delay_param_for

RTOL = 1e-3
ATOL = 1e-6
FD_EPS = 1e-4


@dataclass
class GradcheckTrial:
    seed: int
    state_dim: int
    n_delays: int
    horizon: float
    n_weights: int
    weight_err: float            # worst |adj - fd| / (|fd| + atol/rtol) over weights
    delay_errs: list[float]      # same, one entry per delay

    @property
    def worst(self) -> float:
        return max([self.weight_err, *self.delay_errs])

    def passed(self, rtol: float = RTOL) -> bool:
        return self.worst <= rtol


@dataclass
class _Instance:
    model: NeuralDdeModel
    x0: np.ndarray
    nodes: np.ndarray
    targets: np.ndarray
    horizon: float


def _instance(seed: int, n_delays: int, dt: float = 0.01) -> _Instance:
    rng = np.random.default_rng([seed, 7])
    d = int(rng.integers(1, 4))
    hidden = int(rng.integers(3, 9))
    horizon = float(rng.choice([1.0, 2.0, 3.0, 5.0]))
    tau_max = 2.5
    taus = np.sort(rng.uniform(2 * dt, min(horizon, 2.0), n_delays))
    # keep each delay away from grid multiples so the finite-difference stencil stays on one smooth piece
    off = taus / dt - np.round(taus / dt)
    taus = taus + np.where(np.abs(off) < 0.05, 0.1 * dt, 0.0)
    model = NeuralDdeModel.create(d, n_delays, (hidden,), tau_max, dt, seed=seed,
                                  init_delays=taus if n_delays else None)
    w = model.params.copy()
    w[:model.n_weights] *= 1.5
    model = model.with_params(w)
    n = int(round(horizon / dt))
    n_samples = int(rng.integers(1, 8))
    nodes = np.sort(rng.choice(np.arange(1, n + 1), n_samples, replace=False))
    nodes[-1] = max(nodes[-1], n // 2)
    nodes = np.unique(nodes)
    batch = 2
    x0 = rng.normal(0.0, 1.0, (batch, d))
    targets = rng.normal(0.0, 1.0, (nodes.size, batch, d))
    return _Instance(model, x0, nodes, targets, horizon)


def _loss(inst: _Instance, model, backend, threads) -> float:
    return model.loss_and_grad_batch(inst.x0, inst.nodes, inst.targets, backend=backend,
                                     threads=threads, with_grad=False)[0]


def _rel_err(adj, fd, rtol, atol) -> float:
    if adj.size == 0:
        return 0.0
    return float(np.max(np.abs(adj - fd) / (np.abs(fd) + atol / rtol)))


def check_instance(seed: int, n_delays: int, backend: str | None = None, threads: int | None = None,
                   eps: float = FD_EPS, rtol: float = RTOL, atol: float = ATOL,
                   sign_flip: bool = False) -> GradcheckTrial:
    """Compare ``dJ/dweights`` and ``dJ/dtau`` with central differences.

    ``sign_flip`` negates the adjoint gradient before comparing; it exists so
    the checker itself can be shown to fail on a broken gradient.
    """
    inst = _instance(seed, n_delays)
    model = inst.model
    _, grad, _ = model.loss_and_grad_batch(inst.x0, inst.nodes, inst.targets,
                                           backend=backend, threads=threads)
    gw = grad[:model.n_weights]
    gtau = grad[model.n_weights:] / model.delay_jacobian() if n_delays else np.zeros(0)
    if sign_flip:
        gw, gtau = -gw, -gtau

    fd_w = np.empty(model.n_weights)
    for i in range(model.n_weights):
        p_hi, p_lo = model.params.copy(), model.params.copy()
        p_hi[i] += eps
        p_lo[i] -= eps
        fd_w[i] = (_loss(inst, model.with_params(p_hi), backend, threads)
                   - _loss(inst, model.with_params(p_lo), backend, threads)) / (2 * eps)

    taus = model.realized_delays()
    fd_t = np.empty(n_delays)
    for i in range(n_delays):
        vals = []
        for sgn in (1.0, -1.0):
            t = taus.copy()
            t[i] += sgn * eps
            p = model.params.copy()
            p[model.n_weights:] = delay_param_for(t, model.dt, model.tau_max)
            vals.append(_loss(inst, model.with_params(p), backend, threads))
        fd_t[i] = (vals[0] - vals[1]) / (2 * eps)

    return GradcheckTrial(seed, model.state_dim, n_delays, inst.horizon, model.n_weights,
                          _rel_err(gw, fd_w, rtol, atol),
                          [_rel_err(gtau[i:i + 1], fd_t[i:i + 1], rtol, atol) for i in range(n_delays)])


def run_gradcheck(seed: int = 0, trials: int = 20, backend: str | None = None,
                  threads: int | None = None, sign_flip: bool = False) -> list[GradcheckTrial]:
    """``trials`` instances with seeds ``seed, seed+1, ...``; delay counts cycle through 0..3."""
    return [check_instance(seed + i, i % 4, backend, threads, sign_flip=sign_flip)
            for i in range(trials)]


def report_csv(results: list[GradcheckTrial]) -> str:
    k = max((r.n_delays for r in results), default=0)
    head = ["seed", "state_dim", "k", "horizon", "n_weights", "weights"] + [f"tau_{i + 1}" for i in range(k)]
    lines = [",".join(head + ["pass"])]
    for r in results:
        taus = [f"{e:.9g}" for e in r.delay_errs] + [""] * (k - r.n_delays)
        lines.append(",".join([str(r.seed), str(r.state_dim), str(r.n_delays), f"{r.horizon:.9g}",
                               str(r.n_weights), f"{r.weight_err:.9g}", *taus, str(int(r.passed()))]))
    return "\n".join(lines) + "\n"
