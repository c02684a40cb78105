import math

import numpy as np
import pytest

from ddekit.errors import ConfigurationError, DivergenceError, OutOfRangeError
from ddekit.solver import (
    DdeProblem,
    HistoryFunction,
    eval_traj,
    eval_traj_derivative,
    integrate,
    integrate_ode,
    snap_to_grid,
)


def logistic(t, x, ys):
    return x * (1.0 - ys[0])


def decay(t, x, ys):
    return -x


def solve(field, delays, x0, t1, dt, method="rk4", t0=0.0, history=None):
    prob = DdeProblem(field, delays, np.shape(x0)[-1], t0, t1, dt)
    return integrate(prob, history or HistoryFunction.constant(x0), method)


def test_exponential_decay():
    traj = solve(decay, (), [1.0], 1.0, 1e-3)
    assert traj.states[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_delayed_logistic_method_of_steps():
    traj = solve(logistic, (1.0,), [2.0], 1.0, 1e-2)
    assert traj.states[-1, 0] == pytest.approx(2.0 * math.exp(-1.0), abs=1e-6)
    # the whole first interval follows 2 exp(-t)
    assert np.allclose(traj.states[:, 0], 2.0 * np.exp(-traj.times), rtol=0, atol=1e-6)


def test_logistic_equilibrium():
    traj = solve(logistic, (1.0,), [1.0], 10.0, 1e-2)
    assert np.max(np.abs(traj.states - 1.0)) <= 1e-12


def linear_delay_exact(t, tau):
    """``x' = -x(t - tau)``, ``psi = 1``, valid on ``[0, 2 tau]`` (method of steps)."""
    if t <= tau:
        return 1.0 - t
    return 1.0 - tau - ((1.0 + tau) * (t - tau) - (t * t - tau * tau) / 2.0)


@pytest.mark.parametrize("tau,t1", [(0.73, 1.4), (0.5, 1.0)])
def test_delay_piecewise_polynomial(tau, t1):
    # stage lookups and breakpoint splitting make rk4 exact on quadratic pieces
    traj = solve(lambda t, x, ys: -ys[0], (tau,), [1.0], t1, 1e-2)
    want = np.array([linear_delay_exact(t, tau) for t in traj.times])
    assert np.max(np.abs(traj.states[:, 0] - want)) < 1e-12


def test_tabulated_history():
    grid = np.linspace(-1.0, 0.0, 11)
    hist = HistoryFunction.tabulated(grid, (1.0 + grid)[:, None])
    tau = 0.6
    traj = solve(lambda t, x, ys: -ys[0], (tau,), [1.0], 0.6, 1e-2, history=hist)
    t = traj.times
    assert np.max(np.abs(traj.states[:, 0] - (1.0 - (1.0 - tau) * t - t * t / 2.0))) < 1e-12
    assert np.array_equal(eval_traj(traj, -0.25), [0.75])
    assert eval_traj_derivative(traj, -0.25) == pytest.approx([1.0])


def test_history_checks():
    with pytest.raises(ConfigurationError):
        HistoryFunction.tabulated([0.0], [[1.0]])
    with pytest.raises(ConfigurationError):
        HistoryFunction.tabulated([0.0, 1.0], [[1.0]])


def test_nodes_bitwise_and_history():
    traj = solve(logistic, (1.0,), [2.5], 3.0, 0.05)
    for m in (0, 7, 60):
        assert eval_traj(traj, traj.times[m]).tobytes() == traj.states[m].tobytes()
    assert np.array_equal(eval_traj(traj, -0.3), [2.5])
    assert np.array_equal(eval_traj_derivative(traj, -0.3), [0.0])


def test_hermite_reproduces_linear_solution():
    traj = solve(lambda t, x, ys: np.ones_like(x), (), [0.0], 1.0, 0.1)
    for m in range(10):
        mid = traj.times[m] + 0.05
        assert abs(eval_traj(traj, mid)[0] - mid) < 1e-14


def test_derivative_at_node():
    traj = solve(decay, (), [1.0], 1.0, 1e-2)
    assert eval_traj_derivative(traj, 0.5)[0] == pytest.approx(-eval_traj(traj, 0.5)[0], abs=1e-9)


def test_equilibrium_derivative_zero():
    traj = solve(logistic, (1.0,), [1.0], 3.0, 0.05)
    for t in (-0.5, 0.0, 0.33, 1.01, 2.999):
        assert np.all(np.abs(eval_traj_derivative(traj, t)) < 1e-10)


def test_out_of_range():
    traj = solve(decay, (), [1.0], 1.0, 0.1)
    with pytest.raises(OutOfRangeError):
        eval_traj(traj, 1.05)
    with pytest.raises(OutOfRangeError):
        eval_traj_derivative(traj, 2.0)


def test_interpolant_continuity():
    traj = solve(logistic, (0.7,), [2.2], 3.0, 0.05)
    for t in traj.times[1:-1]:
        left, right = eval_traj(traj, t - 1e-13), eval_traj(traj, t + 1e-13)
        assert np.all(np.abs(left - right) < 1e-12)


@pytest.mark.parametrize("method,factor", [("rk4", 14.0), ("rk2", 3.7), ("euler", 1.9)])
def test_error_ratio_when_halving_dt(method, factor):
    errs = []
    for dt in (0.1, 0.05):
        traj = solve(decay, (), [1.0], 1.0, dt, method)
        errs.append(np.max(np.abs(traj.states[:, 0] - np.exp(-traj.times))))
    assert errs[0] / errs[1] >= factor


@pytest.mark.parametrize("method", ["euler", "rk2", "rk4"])
def test_zero_delays_match_ode_path_bitwise(method, rng):
    A = rng.normal(size=(3, 3))
    x0 = rng.normal(size=3)
    traj = solve(lambda t, x, ys: np.tanh(A @ x), (), x0, 2.0, 0.01, method)
    ode = integrate_ode(lambda t, x: np.tanh(A @ x), x0, 0.0, 2.0, 0.01, method)
    assert traj.states.tobytes() == ode.tobytes()


def test_batched_states_match_single(rng):
    x0 = rng.uniform(2.0, 3.0, size=(4, 1))
    batch = solve(logistic, (1.0,), x0, 3.0, 0.01)
    for i in range(4):
        single = solve(logistic, (1.0,), x0[i], 3.0, 0.01)
        assert np.allclose(batch.states[:, i], single.states, rtol=0, atol=1e-15)


def test_problem_validation():
    with pytest.raises(ConfigurationError):
        DdeProblem(logistic, (0.005,), 1, 0.0, 1.0, 0.01)
    with pytest.raises(ConfigurationError):
        DdeProblem(logistic, (1.0,), 1, 0.0, 1.005, 0.01)
    with pytest.raises(ConfigurationError):
        DdeProblem(logistic, (1.0,), 1, 1.0, 1.0, 0.01)
    with pytest.raises(ConfigurationError):
        solve(decay, (), [1.0], 1.0, 0.1, method="rk45")


def test_history_width_checked():
    prob = DdeProblem(decay, (), 2, 0.0, 1.0, 0.1)
    with pytest.raises(ConfigurationError):
        integrate(prob, HistoryFunction.constant([1.0, 2.0, 3.0]))


def test_divergence_reports_time():
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as info:
            solve(lambda t, x, ys: x * x, (), [1.0], 3.0, 0.01)
    assert 1.0 <= info.value.t <= 3.0


def test_snap_to_grid():
    assert list(snap_to_grid([0.1, 0.3 + 1e-12], 0.0, 0.1, 10)) == [1, 3]
    with pytest.raises(ConfigurationError):
        snap_to_grid([0.15], 0.0, 0.1, 10)
    with pytest.raises(ConfigurationError):
        snap_to_grid([1.2], 0.0, 0.1, 10)
