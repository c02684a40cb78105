"""Wall-clock timing of batched forward passes across backends."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .kernels import available_backends
from .model import NeuralDdeModel

COLUMNS = ("dim", "horizon", "k", "method", "mean_s", "std_s", "backend")


@dataclass
class BenchRow:
    dim: int
    horizon: float
    k: int
    method: str
    mean_s: float
    std_s: float
    backend: str

    def csv(self) -> str:
        return (f"{self.dim},{self.horizon:.9g},{self.k},{self.method},"
                f"{self.mean_s:.9g},{self.std_s:.9g},{self.backend}")


def time_forward(model: NeuralDdeModel, x0, n_steps: int, method: str, backend: str,
                 reps: int = 5, threads: int | None = 1) -> np.ndarray:
    """Seconds per forward pass for ``reps`` repetitions after one warm-up call."""
    model.predict_batch(x0, n_steps, method=method, backend=backend, threads=threads)
    out = np.empty(reps)
    for r in range(reps):
        t = time.perf_counter()
        model.predict_batch(x0, n_steps, method=method, backend=backend, threads=threads)
        out[r] = time.perf_counter() - t
    return out


def run_bench(dims=(1,), horizons=(5.0, 10.0, 20.0), n_delays=(0, 1, 2), methods=("rk4",),
              backends=None, reps: int = 5, seed: int = 0, batch: int = 16, dt: float = 0.01,
              hidden=(32, 32), threads: int | None = 1) -> list[BenchRow]:
    backends = list(backends or available_backends())
    rows = []
    for dim in dims:
        rng = np.random.default_rng([seed, dim])
        x0 = rng.uniform(-1.0, 1.0, (batch, dim))
        for k in n_delays:
            model = NeuralDdeModel.create(dim, k, tuple(hidden), tau_max=1.0, dt=dt, seed=seed)
            for method in methods:
                for horizon in horizons:
                    n_steps = int(round(horizon / dt))
                    for backend in backends:
                        times = time_forward(model, x0, n_steps, method, backend, reps, threads)
                        rows.append(BenchRow(dim, float(horizon), k, method, float(times.mean()),
                                             float(times.std()), backend))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    return "\n".join([",".join(COLUMNS)] + [r.csv() for r in rows]) + "\n"


def speedups(rows: list[BenchRow], fast: str = "compiled", slow: str = "python") -> dict:
    """``slow / fast`` mean-time ratio keyed by ``(dim, horizon, k, method)``."""
    by = {(r.dim, r.horizon, r.k, r.method, r.backend): r.mean_s for r in rows}
    out = {}
    for (dim, h, k, m, b), s in by.items():
        if b == fast and (dim, h, k, m, slow) in by:
            out[(dim, h, k, m)] = by[(dim, h, k, m, slow)] / s
    return out
