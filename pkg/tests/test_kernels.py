import numpy as np
import pytest

from ddekit import kernels
from ddekit.errors import ConfigurationError, DimensionError
from ddekit.kernels import FieldSpec, adjoint_batch, resolve_threads, solve_batch
from ddekit.nn import MlpSpec, mlp_init

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled extension not built")


def setup(d=2, k=2, hidden=(7, 5), use_time=False, B=5, seed=0):
    spec = MlpSpec((d * (k + 1) + int(use_time), *hidden, d))
    field = FieldSpec(spec, d, k, use_time)
    rng = np.random.default_rng(seed)
    w = mlp_init(spec, seed) * 1.3
    delays = np.sort(rng.uniform(0.05, 0.9, k))
    x0 = rng.normal(size=(B, d))
    return field, w, delays, x0


def test_fieldspec_width_checked():
    with pytest.raises(DimensionError):
        FieldSpec(MlpSpec((3, 4, 1)), 1, 1)


@needs_compiled
@pytest.mark.parametrize("method", ["euler", "rk2", "rk4"])
@pytest.mark.parametrize("use_time", [False, True])
def test_backends_agree_forward_and_adjoint(method, use_time):
    field, w, delays, x0 = setup(use_time=use_time)
    n = 150
    sols = {b: solve_batch(field, w, delays, x0, 0.3, 0.01, n, method, backend=b)
            for b in ("compiled", "python")}
    assert np.allclose(sols["compiled"].states, sols["python"].states, rtol=1e-12, atol=1e-13)
    nodes = np.array([20, 77, 150])
    jumps = np.random.default_rng(1).normal(size=(3, x0.shape[0], 2))
    grads = {b: adjoint_batch(field, w, delays, sols[b], nodes, jumps, backend=b) for b in sols}
    for i in range(2):
        assert np.allclose(grads["compiled"][i], grads["python"][i], rtol=1e-10, atol=1e-13)


@needs_compiled
def test_zero_delay_backends_agree():
    field, w, delays, x0 = setup(k=0)
    a = solve_batch(field, w, delays, x0, 0.0, 0.02, 100, backend="compiled")
    b = solve_batch(field, w, delays, x0, 0.0, 0.02, 100, backend="python")
    assert np.allclose(a.states, b.states, rtol=1e-13, atol=1e-14)


@needs_compiled
def test_threaded_runs_are_reproducible():
    field, w, delays, x0 = setup(B=9)
    nodes = np.arange(10, 101, 10)
    jumps = np.random.default_rng(2).normal(size=(nodes.size, 9, 2))
    out = []
    for threads in (1, 3, 3):
        sol = solve_batch(field, w, delays, x0, 0.0, 0.01, 100, threads=threads)
        out.append((sol.states, *adjoint_batch(field, w, delays, sol, nodes, jumps, threads=threads)))
    assert np.array_equal(out[0][0], out[1][0])           # forward rows are independent
    assert all(a.tobytes() == b.tobytes() for a, b in zip(out[1], out[2]))
    assert np.allclose(out[0][1], out[1][1], rtol=1e-13, atol=1e-15)


def test_batch_gradient_is_sum_of_rows(backend):
    field, w, delays, x0 = setup(B=3)
    nodes = np.array([30, 60])
    jumps = np.random.default_rng(3).normal(size=(2, 3, 2))
    sol = solve_batch(field, w, delays, x0, 0.0, 0.01, 60, backend=backend)
    gw, gt = adjoint_batch(field, w, delays, sol, nodes, jumps, backend=backend)
    sw, st = np.zeros_like(gw), np.zeros_like(gt)
    for i in range(3):
        s1 = solve_batch(field, w, delays, x0[i:i + 1], 0.0, 0.01, 60, backend=backend)
        a, b = adjoint_batch(field, w, delays, s1, nodes, jumps[:, i:i + 1], backend=backend)
        sw, st = sw + a, st + b
    assert np.allclose(gw, sw, rtol=1e-12, atol=1e-14)
    assert np.allclose(gt, st, rtol=1e-12, atol=1e-14)


def test_input_validation(backend):
    field, w, delays, x0 = setup()
    with pytest.raises(DimensionError):
        solve_batch(field, w[:-1], delays, x0, 0.0, 0.01, 10, backend=backend)
    with pytest.raises(DimensionError):
        solve_batch(field, w, delays[:1], x0, 0.0, 0.01, 10, backend=backend)
    with pytest.raises(ConfigurationError):
        solve_batch(field, w, [0.005, 0.5], x0, 0.0, 0.01, 10, backend=backend)
    sol = solve_batch(field, w, delays, x0, 0.0, 0.01, 10, backend=backend)
    with pytest.raises(ConfigurationError):
        adjoint_batch(field, w, delays, sol, [5, 3], np.zeros((2, 5, 2)), backend=backend)
    with pytest.raises(DimensionError):
        adjoint_batch(field, w, delays, sol, [5], np.zeros((1, 4, 2)), backend=backend)


def test_unknown_backend():
    field, w, delays, x0 = setup()
    with pytest.raises(ConfigurationError):
        solve_batch(field, w, delays, x0, 0.0, 0.01, 10, backend="fortran")


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("DDEKIT_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("DDEKIT_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("DDEKIT_THREADS", "many")
    with pytest.raises(ConfigurationError):
        resolve_threads()
    with pytest.raises(ConfigurationError):
        resolve_threads(0)


def test_backend_env_override(monkeypatch):
    monkeypatch.setenv("DDEKIT_BACKEND", "python")
    assert kernels.default_backend() == "python"
    monkeypatch.setenv("DDEKIT_BACKEND", "gpu")
    if "compiled" in kernels.available_backends():
        with pytest.raises(ConfigurationError):
            kernels.default_backend()
    monkeypatch.delenv("DDEKIT_BACKEND")
    assert kernels.default_backend() == kernels.available_backends()[0]
