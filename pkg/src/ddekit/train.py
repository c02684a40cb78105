"""Training loop: Adam with weight decay, stepped learning rate, length curriculum."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, DataFormatError, DivergenceError, NumericError
from .model import NeuralDdeModel

DELAY_PARAM_CLIP = 30.0
REQUIRED_KEYS = ("lr_init", "lr_final", "batch_size", "max_epochs", "patience",
                 "length_start_frac", "method", "dt", "seed", "tau_max")


@dataclass
class TrainConfig:
    lr_init: float
    lr_final: float
    batch_size: int
    max_epochs: int
    patience: int
    length_start_frac: float
    method: str
    dt: float
    seed: int
    tau_max: float
    weight_decay: float = 1e-7
    normalize_loss: bool = False
    n_stages: int = 4
    n_delays: int = 2
    hidden: list = field(default_factory=lambda: [32, 32])
    activation: str = "tanh"
    learn_delays: bool = True
    init_delays: list | None = None
    stage_max_epochs: int | None = None

    def __post_init__(self):
        if not (self.lr_init > 0 and self.lr_final > 0):
            raise ConfigurationError("lr_init and lr_final must be positive")
        if self.lr_final > self.lr_init:
            raise ConfigurationError("lr_final must not exceed lr_init")
        if not 0 < self.length_start_frac <= 1:
            raise ConfigurationError("length_start_frac must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.n_stages < 1:
            raise ConfigurationError("batch_size, max_epochs, patience and n_stages must be >= 1")
        if self.stage_max_epochs is not None and self.stage_max_epochs < 1:
            raise ConfigurationError("stage_max_epochs must be >= 1 when set")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        self.hidden = [int(h) for h in self.hidden]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        for key in REQUIRED_KEYS:
            if key not in d:
                raise ConfigurationError(f"missing config key {key!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataFormatError(f"config file {path} not found") from exc
        except ValueError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
              decay_mask=None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; ``weight_decay * param`` is added to the gradient where ``decay_mask`` holds.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ConfigurationError("params, grads and optimizer state must share a shape")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericError(f"non-finite gradient at {bad.size} entries (first index {bad[0]})")
    g = grads
    if weight_decay:
        wd = weight_decay * params
        g = g + (wd if decay_mask is None else np.where(decay_mask, wd, 0.0))
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def scheduler_gamma(lr_init: float, lr_final: float, n: int) -> float:
    """Factor that takes ``lr_init`` to ``lr_final`` in ``n`` multiplicative steps."""
    if not (lr_init > 0 and lr_final > 0):
        raise ConfigurationError("learning rates must be positive")
    if n < 1:
        raise ConfigurationError("need at least one scheduler step")
    return math.exp(math.log(lr_final / lr_init) / n)


def curriculum_lengths(n_samples: int, start_frac: float, n_stages: int) -> list[int]:
    """Loss-sample counts per stage: from ``floor(start_frac * n)`` up to ``n``, evenly spaced."""
    first = max(1, math.floor(start_frac * n_samples))
    if n_stages == 1 or first >= n_samples:
        return [n_samples]
    lengths = np.linspace(first, n_samples, n_stages)
    out = sorted({int(round(x)) for x in lengths})
    out[-1] = n_samples
    return out


@dataclass
class TrainLog:
    n_delays: int
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    delays: list = field(default_factory=list)
    final_train_mse: float | None = None
    final_test_mse: float | None = None
    stopped: str = ""

    def append(self, epoch, loss, lr, length, delays):
        self.epochs.append(int(epoch))
        self.losses.append(float(loss))
        self.lrs.append(float(lr))
        self.lengths.append(int(length))
        self.delays.append([float(t) for t in delays])

    def to_csv(self) -> str:
        head = ["epoch", "loss", "lr", "length"] + [f"tau_{i + 1}" for i in range(self.n_delays)]
        lines = [",".join(head)]
        for e, l, r, n, taus in zip(self.epochs, self.losses, self.lrs, self.lengths, self.delays):
            lines.append(",".join([str(e), f"{l:.9g}", f"{r:.9g}", str(n)] + [f"{t:.9g}" for t in taus]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv())
        tmp.replace(path)

    def delay_drift(self, frac: float = 0.1) -> np.ndarray:
        """Relative change of each delay over the last ``frac`` of logged epochs."""
        if not self.delays or self.n_delays == 0:
            return np.zeros(self.n_delays)
        d = np.asarray(self.delays)
        start = max(0, len(d) - max(1, math.ceil(frac * len(d))) - 1)
        tail = d[start:]
        return (tail.max(axis=0) - tail.min(axis=0)) / np.abs(tail[-1])


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    params: np.ndarray
    adam: AdamState
    epoch: int = 0
    stage: int = 0
    lr: float = 0.0
    best: float = math.inf
    since_best: int = 0
    stage_epochs: int = 0
    retried: bool = False

    def save(self, path) -> None:
        head = {"epoch": self.epoch, "stage": self.stage, "lr": self.lr.hex(),
                "best": float(self.best).hex(), "since_best": self.since_best,
                "stage_epochs": self.stage_epochs,
                "adam_t": self.adam.t, "n": int(self.params.size)}
        body = np.concatenate([self.params, self.adam.m, self.adam.v]).astype("<f8").tobytes()
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(json.dumps(head, sort_keys=True).encode() + b"\n" + body)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "TrainState":
        try:
            raw = Path(path).read_bytes()
            nl = raw.index(b"\n")
            head = json.loads(raw[:nl])
            n = int(head["n"])
            arr = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(np.float64)
            if arr.size != 3 * n:
                raise ValueError("payload length")
            return cls(arr[:n].copy(), AdamState(arr[n:2 * n].copy(), arr[2 * n:].copy(), int(head["adam_t"])),
                       int(head["epoch"]), int(head["stage"]), float.fromhex(head["lr"]),
                       float.fromhex(head["best"]), int(head["since_best"]), int(head["stage_epochs"]))
        except (OSError, ValueError, KeyError) as exc:
            raise DataFormatError(f"cannot read training state {path}: {exc}") from exc


def build_model(config: TrainConfig, state_dim: int) -> NeuralDdeModel:
    return NeuralDdeModel.create(state_dim, config.n_delays, tuple(config.hidden), config.tau_max,
                                 config.dt, seed=config.seed, activation=config.activation,
                                 init_delays=config.init_delays)


class Trainer:
    """Runs epochs over a dataset; one Adam step per minibatch."""

    def __init__(self, config: TrainConfig, dataset: Dataset, model: NeuralDdeModel,
                 backend: str | None = None, threads: int | None = None):
        self.config = config
        self.model = model
        self.backend = backend
        self.threads = threads
        if abs(model.dt - config.dt) > 0:
            raise ConfigurationError("model dt differs from config dt")
        if dataset.values.shape[2] != model.state_dim:
            raise ConfigurationError(f"dataset has {dataset.values.shape[2]} columns, model state {model.state_dim}")
        ratio = dataset.dt / config.dt
        self.stride = int(round(ratio))
        if self.stride < 1 or abs(ratio - self.stride) > 1e-9:
            raise ConfigurationError(f"data step {dataset.dt} is not a multiple of solver dt {config.dt}")
        self.t0 = float(dataset.times[0])
        self.x0 = dataset.values[:, 0, :]
        self.targets = np.swapaxes(dataset.values[:, 1:, :], 0, 1)   # (S, n_traj, d)
        self.n_samples = self.targets.shape[0]
        if config.normalize_loss:
            scale = dataset.values.reshape(-1, model.state_dim).std(axis=0)
            self.weights = 1.0 / np.where(scale > 0, scale, 1.0) ** 2
        else:
            self.weights = None
        self.lengths = curriculum_lengths(self.n_samples, config.length_start_frac, config.n_stages)
        self.decay_mask = np.arange(model.n_params) < model.n_weights

    def nodes(self, length: int) -> np.ndarray:
        return self.stride * np.arange(1, length + 1)

    def batch_loss(self, model, idx, length, with_grad=True):
        return model.loss_and_grad_batch(self.x0[idx], self.nodes(length), self.targets[:length, idx],
                                         t0=self.t0, method=self.config.method, backend=self.backend,
                                         threads=self.threads, with_grad=with_grad,
                                         weights=self.weights)

    def evaluate(self, model=None, length: int | None = None) -> float:
        """Loss over every trajectory at the given curriculum length (full by default)."""
        model = model or self.model
        length = self.n_samples if length is None else length
        idx = np.arange(self.x0.shape[0])
        return self.batch_loss(model, idx, length, with_grad=False)[0]

    def run_epoch(self, state: TrainState) -> tuple[float, TrainState]:
        cfg = self.config
        length = self.lengths[state.stage]
        rng = np.random.default_rng([cfg.seed, state.epoch])
        order = rng.permutation(self.x0.shape[0])
        params, adam = state.params, state.adam
        total, count = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            model = self.model.with_params(params)
            loss, grad, _ = self.batch_loss(model, idx, length)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss")
            if not cfg.learn_delays:
                grad[model.n_weights:] = 0.0
            params, adam = adam_step(params, grad, adam, state.lr, cfg.weight_decay, self.decay_mask)
            params[self.model.n_weights:] = np.clip(params[self.model.n_weights:],
                                                    -DELAY_PARAM_CLIP, DELAY_PARAM_CLIP)
            total += loss * idx.size
            count += idx.size
        new = TrainState(params, adam, state.epoch, state.stage, state.lr, state.best,
                         state.since_best, state.stage_epochs)
        return total / count, new

    def initial_state(self) -> TrainState:
        return TrainState(self.model.params.copy(), AdamState.zeros(self.model.n_params), 0, 0,
                          self.config.lr_init)

    def train(self, state: TrainState | None = None, log: TrainLog | None = None,
              on_epoch=None) -> tuple[NeuralDdeModel, TrainLog, TrainState]:
        cfg = self.config
        state = state or self.initial_state()
        log = log or TrainLog(self.model.n_delays)
        last = len(self.lengths) - 1
        while state.epoch < cfg.max_epochs:
            try:
                loss, nxt = self.run_epoch(state)
            except (DivergenceError, NumericError) as exc:
                if state.retried:
                    raise DivergenceError(f"training diverged at epoch {state.epoch} after a retry: {exc}") from exc
                state.lr *= 0.5
                state.retried = True
                continue
            nxt.retried = False
            nxt.epoch = state.epoch + 1
            nxt.stage_epochs += 1
            model = self.model.with_params(nxt.params)
            taus = model.realized_delays()
            if model.n_delays and not (np.all(taus > model.dt) and np.all(taus < model.tau_max)):
                raise NumericError(f"delays {taus} left ({model.dt}, {model.tau_max})")
            log.append(nxt.epoch, loss, nxt.lr, self.lengths[nxt.stage], taus)
            if loss < nxt.best:
                nxt.best, nxt.since_best = loss, 0
            else:
                nxt.since_best += 1
            state = nxt
            self.model = model
            if on_epoch is not None:
                on_epoch(state, log)
            capped = cfg.stage_max_epochs is not None and state.stage_epochs >= cfg.stage_max_epochs
            if state.since_best >= cfg.patience or (capped and state.stage < last):
                if state.stage == last:
                    log.stopped = "converged"
                    break
                remaining = last - state.stage
                state.lr *= scheduler_gamma(state.lr, cfg.lr_final, remaining)
                if remaining == 1:
                    state.lr = cfg.lr_final
                state.stage += 1
                state.best, state.since_best, state.stage_epochs = math.inf, 0, 0
        else:
            log.stopped = "max_epochs"
        log.final_train_mse = self.evaluate()
        return self.model, log, state


def train(config: TrainConfig, dataset: Dataset, model: NeuralDdeModel | None = None,
          backend: str | None = None, threads: int | None = None):
    """Fit ``model`` (built from ``config`` when omitted) and return ``(model, log)``."""
    model = model or build_model(config, dataset.values.shape[2])
    trainer = Trainer(config, dataset, model, backend, threads)
    model, log, _ = trainer.train()
    return model, log
