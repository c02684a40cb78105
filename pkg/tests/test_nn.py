import math

import numpy as np
import pytest

from ddekit.errors import ConfigurationError, DataFormatError, DimensionError, NumericError
from ddekit.nn import (
    MlpSpec,
    finite_diff_jacobian,
    load_params,
    mlp_forward,
    mlp_init,
    mlp_vjp,
    save_params,
)


def hand_mlp(sizes, params, x, act):
    """Loop-based re-evaluation that only shares the documented layout."""
    h = list(x)
    off = 0
    for layer in range(len(sizes) - 1):
        fi, fo = sizes[layer], sizes[layer + 1]
        w = params[off:off + fo * fi]
        off += fo * fi
        b = params[off:off + fo]
        off += fo
        out = []
        for r in range(fo):
            s = b[r]
            for c in range(fi):
                s += w[r * fi + c] * h[c]
            out.append(s)
        if layer < len(sizes) - 2:
            out = [act(z) for z in out]
        h = out
    return np.array(h)


def test_param_counts():
    spec = MlpSpec((2, 2))
    p = mlp_init(spec, 0)
    p[:] = 0.0
    assert p.shape == (6,) and not p.any()
    assert mlp_init(MlpSpec((3, 5, 2)), 7).size == 32


def test_init_deterministic_and_scaled():
    spec = MlpSpec((4, 16, 3))
    a, b = mlp_init(spec, 3), mlp_init(spec, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, mlp_init(spec, 4))
    for w, bias, fo, fi in spec.layers():
        assert np.all(np.abs(a[w]) <= 1.0 / math.sqrt(fi))
        assert not a[bias].any()


@pytest.mark.parametrize("sizes", [(1,), (2, 0, 1)])
def test_invalid_spec(sizes):
    with pytest.raises(ConfigurationError):
        MlpSpec(sizes)


def test_unknown_activation():
    with pytest.raises(ConfigurationError):
        MlpSpec((2, 2), "gelu")


def test_identity_map():
    spec = MlpSpec((2, 2), "identity")
    p = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    assert np.array_equal(mlp_forward(spec, p, [1.0, 2.0]), [1.0, 2.0])


def test_zero_params_zero_output(rng):
    spec = MlpSpec((3, 8, 8, 2))
    out = mlp_forward(spec, np.zeros(spec.n_params), rng.normal(size=3))
    assert np.array_equal(out, np.zeros(2))


def test_forward_matches_hand_evaluation():
    spec = MlpSpec((2, 3, 1))
    p = mlp_init(spec, 11)
    p[spec.n_params - 1] = 0.3
    got = mlp_forward(spec, p, [0.5, -0.5])
    want = hand_mlp(spec.layer_sizes, p, [0.5, -0.5], math.tanh)
    assert got == pytest.approx(want, rel=1e-14, abs=1e-15)


def test_batched_forward_rows_match_single(rng):
    spec = MlpSpec((3, 5, 2), "relu")
    p = mlp_init(spec, 1)
    x = rng.normal(size=(4, 3))
    batch = mlp_forward(spec, p, x)
    for i in range(4):
        assert np.allclose(batch[i], mlp_forward(spec, p, x[i]), rtol=0, atol=1e-15)


def test_width_mismatch():
    spec = MlpSpec((3, 2))
    with pytest.raises(DimensionError):
        mlp_forward(spec, mlp_init(spec, 0), [1.0, 2.0])
    with pytest.raises(DimensionError):
        mlp_vjp(spec, mlp_init(spec, 0), [1.0, 2.0, 3.0], [1.0])


def test_linear_layer_vjp(rng):
    spec = MlpSpec((3, 2), "identity")
    p = rng.normal(size=spec.n_params)
    W, b = p[:6].reshape(2, 3), p[6:]
    x, v = rng.normal(size=3), rng.normal(size=2)
    gin, gp = mlp_vjp(spec, p, x, v)
    assert np.allclose(gin, W.T @ v, rtol=0, atol=1e-15)
    assert np.allclose(gp[:6], np.outer(v, x).ravel(), rtol=0, atol=1e-15)
    assert np.array_equal(gp[6:], v)
    assert np.allclose(mlp_forward(spec, p, x), W @ x + b, rtol=0, atol=1e-15)


def test_zero_cotangent(rng):
    spec = MlpSpec((3, 4, 2))
    gin, gp = mlp_vjp(spec, mlp_init(spec, 0), rng.normal(size=3), np.zeros(2))
    assert not gin.any() and not gp.any()


@pytest.mark.parametrize("act", ["tanh", "identity", "relu"])
@pytest.mark.parametrize("seed", range(4))
def test_vjp_matches_finite_differences(act, seed):
    r = np.random.default_rng(seed)
    spec = MlpSpec((4, 6, 5, 3), act)
    p = mlp_init(spec, seed) + r.normal(0, 0.1, spec.n_params)
    x = r.normal(size=4)
    v = r.normal(size=3)
    gin, gp = mlp_vjp(spec, p, x, v)
    jx = finite_diff_jacobian(lambda z: mlp_forward(spec, p, z), x, 1e-6)
    jp = finite_diff_jacobian(lambda q: mlp_forward(spec, q, x), p, 1e-6)
    assert np.allclose(gin, v @ jx, rtol=1e-5, atol=1e-8)
    assert np.allclose(gp, v @ jp, rtol=1e-5, atol=1e-8)


def test_vjp_linear_in_cotangent(rng):
    spec = MlpSpec((3, 7, 2))
    p, x = mlp_init(spec, 5), rng.normal(size=(5, 3))
    v1, v2 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    a = mlp_vjp(spec, p, x, v1 + v2)
    b1, b2 = mlp_vjp(spec, p, x, v1), mlp_vjp(spec, p, x, v2)
    assert np.allclose(a[0], b1[0] + b2[0], rtol=1e-13, atol=1e-15)
    assert np.allclose(a[1], b1[1] + b2[1], rtol=1e-13, atol=1e-15)


def test_batched_vjp_sums_parameter_gradients(rng):
    spec = MlpSpec((2, 4, 2))
    p, x, v = mlp_init(spec, 2), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    gin, gp = mlp_vjp(spec, p, x, v)
    rows = [mlp_vjp(spec, p, x[i], v[i]) for i in range(3)]
    assert np.allclose(gin, np.stack([r[0] for r in rows]), rtol=0, atol=1e-15)
    assert np.allclose(gp, sum(r[1] for r in rows), rtol=1e-14, atol=1e-15)


def test_forward_is_deterministic(rng):
    spec = MlpSpec((3, 8, 2))
    p, x = mlp_init(spec, 9), rng.normal(size=3)
    assert mlp_forward(spec, p, x).tobytes() == mlp_forward(spec, p, x).tobytes()


def test_fd_jacobian_identity_and_square():
    x = np.array([0.3, -1.2, 4.0])
    assert np.allclose(finite_diff_jacobian(lambda z: z, x), np.eye(3), rtol=0, atol=1e-12)
    assert finite_diff_jacobian(lambda z: z ** 2, [3.0], 1e-5)[0, 0] == pytest.approx(6.0, abs=1e-8)


def test_fd_jacobian_errors():
    with pytest.raises(ConfigurationError):
        finite_diff_jacobian(lambda z: z, [1.0], eps=0.0)
    with pytest.raises(NumericError):
        finite_diff_jacobian(lambda z: z + np.nan, [0.0], eps=1e-3)


def test_param_file_round_trip(tmp_path, rng):
    spec = MlpSpec((3, 4, 2), "relu")
    p = np.concatenate([mlp_init(spec, 0), rng.normal(size=2)])
    save_params(tmp_path / "p.bin", p, spec, n_delays=2, extra={"note": "x"})
    q, spec2, header = load_params(tmp_path / "p.bin")
    assert q.tobytes() == p.tobytes()
    assert spec2 == spec and header["n_delays"] == 2 and header["note"] == "x"


def test_param_file_errors(tmp_path):
    spec = MlpSpec((2, 2))
    with pytest.raises(DimensionError):
        save_params(tmp_path / "p.bin", np.zeros(5), spec)
    with pytest.raises(DataFormatError):
        load_params(tmp_path / "missing.bin")
    save_params(tmp_path / "p.bin", np.zeros(6), spec)
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(DataFormatError):
        load_params(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"{not json\n" + raw[raw.index(b"\n") + 1:])
    with pytest.raises(DataFormatError):
        load_params(tmp_path / "bad.bin")
