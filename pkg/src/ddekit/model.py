"""Neural DDE model: an MLP vector field plus sigmoid-bounded learnable delays."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .adjoint import LossSpec, backward_adjoint, loss_eval
from .errors import ConfigurationError, DataFormatError, DimensionError
from .kernels import BatchSolution, FieldSpec, _python_field, adjoint_batch, solve_batch
from .nn import MlpSpec, load_params, mlp_init, save_params
from .solver import DdeProblem, DenseTrajectory, HistoryFunction, integrate, snap_to_grid


def delay_param_for(tau, tau_min: float, tau_max: float) -> np.ndarray:
    """Inverse of the realized-delay map."""
    frac = (np.asarray(tau, dtype=np.float64) - tau_min) / (tau_max - tau_min)
    if np.any(frac <= 0) or np.any(frac >= 1):
        raise ConfigurationError(f"delays {tau} must lie strictly inside ({tau_min}, {tau_max})")
    return logit(frac)


@dataclass
class NeuralDdeModel:
    """``x' = f([x(t), x(t - tau_1), ..., x(t - tau_k)])`` with ``tau_i = dt + (tau_max - dt) sigmoid(p_i)``.

    ``params`` holds the MLP weights followed by the ``k`` delay parameters.
    """

    spec: MlpSpec
    state_dim: int
    n_delays: int
    tau_max: float
    dt: float
    params: np.ndarray
    use_time: bool = False
    field_spec: FieldSpec = field(init=False, repr=False)

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if self.n_delays < 0:
            raise ConfigurationError("number of delays must be >= 0")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.n_delays and not self.tau_max > self.dt:
            raise ConfigurationError(f"tau_max={self.tau_max} must exceed dt={self.dt}")
        self.field_spec = FieldSpec(self.spec, self.state_dim, self.n_delays, self.use_time)
        if self.params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {self.params.shape}")

    @classmethod
    def create(cls, state_dim: int, n_delays: int, hidden: tuple[int, ...] | list[int], tau_max: float,
               dt: float, seed: int = 0, activation: str = "tanh", use_time: bool = False,
               init_delays=None) -> "NeuralDdeModel":
        """Fresh model; delays spread over the middle of ``(dt, tau_max)`` unless given."""
        width_in = state_dim * (n_delays + 1) + int(use_time)
        spec = MlpSpec((width_in, *hidden, state_dim), activation)
        weights = mlp_init(spec, seed)
        if init_delays is not None:
            init = np.asarray(init_delays, dtype=np.float64)
            if init.shape != (n_delays,):
                raise DimensionError(f"need {n_delays} initial delays, got {init.shape}")
            p = delay_param_for(init, dt, tau_max)
        elif n_delays:
            rng = np.random.default_rng([seed, 1])
            frac = np.linspace(0.2, 0.8, n_delays) if n_delays > 1 else np.array([0.5])
            frac = frac * (1.0 + rng.uniform(-0.05, 0.05, n_delays))
            p = logit(frac)
        else:
            p = np.zeros(0)
        return cls(spec, state_dim, n_delays, float(tau_max), float(dt),
                   np.concatenate([weights, p]), use_time)

    @property
    def n_weights(self) -> int:
        return self.spec.n_params

    @property
    def n_params(self) -> int:
        return self.spec.n_params + self.n_delays

    @property
    def weights(self) -> np.ndarray:
        return self.params[:self.n_weights]

    @property
    def delay_params(self) -> np.ndarray:
        return self.params[self.n_weights:]

    def with_params(self, params) -> "NeuralDdeModel":
        return replace(self, params=np.array(params, dtype=np.float64))

    def realized_delays(self, delay_params=None) -> np.ndarray:
        p = self.delay_params if delay_params is None else np.asarray(delay_params, dtype=np.float64)
        return self.dt + (self.tau_max - self.dt) * expit(p)

    def delay_jacobian(self) -> np.ndarray:
        """``d tau_i / d p_i``."""
        s = expit(self.delay_params)
        return (self.tau_max - self.dt) * s * (1.0 - s)

    # generic path: any history, reference solver

    def problem(self, t0: float, t1: float) -> tuple[DdeProblem, callable]:
        vf, vjp = _python_field(self.field_spec, self.weights)
        return DdeProblem(vf, tuple(self.realized_delays()), self.state_dim, t0, t1, self.dt), vjp

    def predict(self, history: HistoryFunction, t1: float, t0: float = 0.0,
                method: str = "rk4") -> DenseTrajectory:
        problem, _ = self.problem(t0, t1)
        return integrate(problem, history, method)

    def grad(self, history: HistoryFunction, loss: LossSpec, t1: float, t0: float = 0.0,
             method: str = "rk4", observation=None):
        """Return ``(loss, dJ/dweights, dJ/ddelay_params)``."""
        problem, vjp = self.problem(t0, t1)
        fwd = integrate(problem, history, method)
        run = backward_adjoint(problem, fwd, loss, vjp, method, observation)
        gw = run.grad_weights if run.grad_weights.size else np.zeros(self.n_weights)
        return loss_eval(fwd, loss, observation), gw, run.grad_delays * self.delay_jacobian()

    # batched path: constant histories, selected backend

    def predict_batch(self, x0, n_steps: int, t0: float = 0.0, method: str = "rk4",
                      backend: str | None = None, threads: int | None = None) -> BatchSolution:
        return solve_batch(self.field_spec, self.weights, self.realized_delays(), x0, t0,
                           self.dt, n_steps, method, backend, threads)

    def loss_and_grad_batch(self, x0, sample_nodes, targets, observed=None, t0: float = 0.0,
                            method: str = "rk4", backend: str | None = None,
                            threads: int | None = None, with_grad: bool = True, weights=None):
        """MSE against ``targets`` of shape ``(S, B, n_observed)`` at the given nodes.

        ``weights`` optionally scales each observed column's squared error.
        Returns ``(loss, grad over all params or None, solution)``.
        """
        nodes = np.asarray(sample_nodes, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.float64)
        obs = list(range(self.state_dim)) if observed is None else list(observed)
        sol = self.predict_batch(x0, int(nodes[-1]), t0, method, backend, threads)
        pred = sol.states[nodes][..., obs]
        if pred.shape != targets.shape:
            raise DimensionError(f"predictions {pred.shape} vs targets {targets.shape}")
        resid = pred - targets
        w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=np.float64)
        loss = float(np.mean(w * resid * resid))
        if not with_grad:
            return loss, None, sol
        jumps = np.zeros(pred.shape[:-1] + (self.state_dim,))
        jumps[..., obs] = (2.0 / targets.size) * w * resid
        gw, gtau = adjoint_batch(self.field_spec, self.weights, self.realized_delays(), sol,
                                 nodes, jumps, backend, threads)
        return loss, np.concatenate([gw, gtau * self.delay_jacobian()]), sol

    # checkpoints

    def header(self) -> dict:
        return {"kind": "neural_dde", "state_dim": self.state_dim,
                "tau_min": self.dt, "tau_max": self.tau_max, "dt": self.dt, "use_time": self.use_time}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.header()
        if extra:
            meta["extra"] = extra
        save_params(path, self.params, self.spec, self.n_delays, meta)

    @classmethod
    def load(cls, path) -> "NeuralDdeModel":
        params, spec, header = load_params(path)
        try:
            if header.get("kind") != "neural_dde":
                raise KeyError("kind")
            return cls(spec, int(header["state_dim"]), int(header["n_delays"]),
                       float(header["tau_max"]), float(header["dt"]), params,
                       bool(header.get("use_time", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path} is not a neural DDE checkpoint ({exc})") from exc


def sample_nodes(times, t0: float, dt: float, n_steps: int | None = None) -> np.ndarray:
    """Node indices of sample times on the solver grid, excluding ``t0`` itself."""
    times = np.asarray(times, dtype=np.float64)
    n = int(round((times.max() - t0) / dt)) if n_steps is None else n_steps
    return snap_to_grid(times, t0, dt, n)
