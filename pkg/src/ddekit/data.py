"""Synthetic trajectory datasets and their on-disk format.

A dataset directory holds ``meta.json`` plus one ``traj_XXXX.csv`` per
trajectory with header ``t,y0,y1,...``. Values are written with 17
significant digits so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, DimensionError
from .solver import DdeProblem, GRID_TOL, HistoryFunction, integrate, integrate_ode

OUTPUT_DT = 0.05
REFERENCE_DT = 1e-3


@dataclass
class Dataset:
    """Trajectories on one shared uniform grid.

    ``values`` has shape ``(n_traj, n_times, n_columns)``; column ``j`` holds
    state component ``observed_indices[j]`` of the generating system.
    """

    times: np.ndarray
    values: np.ndarray
    observed_indices: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed_indices = tuple(int(i) for i in self.observed_indices)
        if self.values.ndim != 3 or self.values.shape[1] != self.times.size:
            raise DimensionError(f"values {self.values.shape} do not match {self.times.size} times")
        if self.values.shape[2] != len(self.observed_indices):
            raise DimensionError("one observed index is needed per column")
        if self.times.size > 1:
            steps = np.diff(self.times)
            if np.max(np.abs(steps - steps[0])) > GRID_TOL * max(1.0, abs(steps[0])):
                raise DataFormatError("time grid is not uniform")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("dataset contains non-finite values")

    @property
    def n_traj(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def trajectories(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.times, v) for v in self.values]

    def subset(self, idx) -> "Dataset":
        return replace(self, values=self.values[np.asarray(idx)], meta=dict(self.meta))


def _subsample(states: np.ndarray, fine_dt: float, out_dt: float) -> np.ndarray:
    ratio = out_dt / fine_dt
    stride = int(round(ratio))
    if abs(ratio - stride) > 1e-9:
        raise ConfigurationError(f"output dt {out_dt} is not a multiple of {fine_dt}")
    return states[::stride]


def logistic_field(t, x, delayed):
    return x * (1.0 - delayed[0])


def gen_logistic_dde(n_traj: int, seed: int, t1: float = 10.0, tau: float = 1.0,
                     x0=None, dt_ref: float = REFERENCE_DT, out_dt: float = OUTPUT_DT) -> Dataset:
    """``x' = x(t) (1 - x(t - tau))`` with constant history ``x0 ~ U(2, 3)``."""
    if n_traj < 1:
        raise ConfigurationError("n_traj must be >= 1")
    if x0 is None:
        x0 = np.random.default_rng(seed).uniform(2.0, 3.0, size=n_traj)
    x0 = np.asarray(x0, dtype=np.float64).reshape(n_traj, 1)
    problem = DdeProblem(logistic_field, (tau,), 1, 0.0, t1, dt_ref)
    traj = integrate(problem, HistoryFunction.constant(x0), "rk4")
    values = np.swapaxes(_subsample(traj.states, dt_ref, out_dt), 0, 1)
    times = np.arange(values.shape[1]) * out_dt
    meta = {"generator": "logistic_dde", "params": {"tau": tau, "x0_low": 2.0, "x0_high": 3.0},
            "dt": out_dt, "dt_ref": dt_ref, "horizon": t1, "seed": seed, "full_dim": 1}
    return Dataset(times, values, (0,), meta)


BRUSSELATOR_A = 1.0
BRUSSELATOR_B = 3.0


def brusselator_field(t, phi, a: float = BRUSSELATOR_A, b: float = BRUSSELATOR_B):
    p1, p2 = phi[..., 0], phi[..., 1]
    q = p1 * p1 * p2
    return np.stack([a - b * p1 - p1 + q, b * p1 - q], axis=-1)


def brusselator_equilibrium(a: float = BRUSSELATOR_A, b: float = BRUSSELATOR_B) -> np.ndarray:
    return np.array([a, b / a])


def gen_brusselator(n_traj: int, seed: int, t1: float = 25.0, observed=(0,),
                    a: float = BRUSSELATOR_A, b: float = BRUSSELATOR_B,
                    dt_ref: float = REFERENCE_DT, out_dt: float = OUTPUT_DT) -> Dataset:
    """Two-species kinetics from ``phi1(0) ~ U(0, 2)``, ``phi2(0) = 0``; keeps ``observed`` columns."""
    if n_traj < 1:
        raise ConfigurationError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    x0 = np.zeros((n_traj, 2))
    x0[:, 0] = rng.uniform(0.0, 2.0, size=n_traj)
    states = integrate_ode(lambda t, x: brusselator_field(t, x, a, b), x0, 0.0, t1, dt_ref, "rk4")
    values = np.swapaxes(_subsample(states, dt_ref, out_dt), 0, 1)
    times = np.arange(values.shape[1]) * out_dt
    meta = {"generator": "brusselator", "params": {"A": a, "B": b},
            "dt": out_dt, "dt_ref": dt_ref, "horizon": t1, "seed": seed, "full_dim": 2}
    full = Dataset(times, values, (0, 1), meta)
    return full if observed is None else mask_observe(full, observed)


def mask_observe(dataset: Dataset, indices) -> Dataset:
    """Keep the columns of the listed state components."""
    indices = tuple(int(i) for i in indices)
    if not indices:
        raise ConfigurationError("at least one observed index is required")
    try:
        cols = [dataset.observed_indices.index(i) for i in indices]
    except ValueError:
        raise ConfigurationError(f"indices {indices} not among {dataset.observed_indices}") from None
    meta = dict(dataset.meta)
    meta.setdefault("full_dim", len(dataset.observed_indices))
    return Dataset(dataset.times, dataset.values[..., cols], indices, meta)


def sinc(x):
    """Unnormalized ``sin(x) / x`` with ``sinc(0) = 1``."""
    return np.sinc(np.asarray(x, dtype=np.float64) / np.pi)


def two_delay_update(u, v, alpha: float = 0.2):
    """Deterministic part of the map for lagged values ``u = g[n - p1]``, ``v = g[n - p2]``."""
    return np.cos(u) * np.sin(v) - alpha * sinc(3.0 * u) + alpha * np.cos(v)


def gen_two_delay_map(length: int, seed: int, alpha: float = 0.2, p1: int = 125, p2: int = 200,
                      noise: float = 0.02, burn_in: int = 5000, history=None) -> np.ndarray:
    """Scalar series ``g[n] = F(g[n - p1], g[n - p2]) + xi[n]`` with ``xi ~ U(-noise, noise)``.

    The history (``max(p1, p2)`` values) is iid ``U(0, 1)`` unless given, and
    the first ``burn_in`` generated values are discarded.
    """
    if min(p1, p2) < 1:
        raise ConfigurationError("lags must be positive")
    if length <= 10 * max(p1, p2):
        raise ConfigurationError(f"length must exceed {10 * max(p1, p2)}")
    rng = np.random.default_rng(seed)
    h = max(p1, p2)
    g = np.empty(h + burn_in + length)
    g[:h] = rng.uniform(0.0, 1.0, h) if history is None else np.broadcast_to(history, (h,))
    xi = rng.uniform(-noise, noise, g.size - h) if noise > 0 else np.zeros(g.size - h)
    block = min(p1, p2)
    for start in range(h, g.size, block):
        stop = min(start + block, g.size)
        g[start:stop] = (two_delay_update(g[start - p1:stop - p1], g[start - p2:stop - p2], alpha)
                         + xi[start - h:stop - h])
    return g[h + burn_in:]


# persistence

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        meta = dict(dataset.meta)
        meta.update({"observed_indices": list(dataset.observed_indices),
                     "n_traj": dataset.n_traj, "n_times": int(dataset.times.size)})
        cols = ["t"] + [f"y{j}" for j in range(dataset.values.shape[2])]
        for i, vals in enumerate(dataset.values):
            lines = [",".join(cols)]
            lines += [",".join([_fmt(t)] + [_fmt(v) for v in row]) for t, row in zip(dataset.times, vals)]
            (path / f"traj_{i:04d}.csv").write_text("\n".join(lines) + "\n")
        tmp = path / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        tmp.replace(path / "meta.json")
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DataFormatError(f"no dataset at {path}") from exc
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"unreadable meta.json in {path}: {exc}") from exc
    try:
        n_traj = int(meta["n_traj"])
        observed = tuple(meta["observed_indices"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"meta.json in {path} lacks {exc}") from exc
    times, values = None, []
    for i in range(n_traj):
        f = path / f"traj_{i:04d}.csv"
        try:
            with open(f, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise DataFormatError(f"cannot read {f}: {exc}") from exc
        want = ["t"] + [f"y{j}" for j in range(len(observed))]
        if not rows or rows[0] != want:
            raise DataFormatError(f"{f} has header {rows[:1]}, expected {want}")
        try:
            arr = np.array([[float(x) for x in r] for r in rows[1:]])
        except ValueError as exc:
            raise DataFormatError(f"non-numeric entry in {f}") from exc
        if arr.ndim != 2 or arr.shape[1] != len(want):
            raise DataFormatError(f"{f} has ragged rows")
        if times is None:
            times = arr[:, 0]
        elif arr.shape[0] != times.size or np.any(arr[:, 0] != times):
            raise DataFormatError(f"{f} is not on the shared time grid")
        values.append(arr[:, 1:])
    if times is None:
        raise DataFormatError(f"dataset at {path} has no trajectories")
    stored = {k: v for k, v in meta.items() if k not in ("observed_indices", "n_traj", "n_times")}
    return Dataset(times, np.stack(values), observed, stored)
