"""Multilayer perceptrons over flat float64 parameter vectors.

Parameter layout is frozen: for every layer, the weight matrix of shape
``(fan_out, fan_in)`` in row-major order, followed by its bias. Any trailing
entries (delay parameters of a neural DDE) are owned by the caller.

All functions accept a single input of shape ``(fan_in,)`` or a batch of
shape ``(B, fan_in)``. Parameter gradients of a batched call are summed over
the batch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DataFormatError, DimensionError, NumericError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigurationError("layer_sizes needs at least input and output widths")
        if any(s < 1 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def layers(self):
        """Yield ``(W_slice, b_slice, fan_out, fan_in)`` per layer in storage order."""
        off = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            fi, fo = s[i], s[i + 1]
            w = slice(off, off + fo * fi)
            off += fo * fi
            b = slice(off, off + fo)
            off += fo
            yield w, b, fo, fi

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "tanh"))


def mlp_init(spec: MlpSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if not isinstance(spec, MlpSpec):
        raise ConfigurationError("mlp_init expects an MlpSpec")
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for w, _, fo, fi in spec.layers():
        bound = 1.0 / np.sqrt(fi)
        params[w] = rng.uniform(-bound, bound, size=fo * fi)
    return params


def _check(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> None:
    if params.shape != (spec.n_params,):
        raise DimensionError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != spec.n_in:
        raise DimensionError(f"input width {x.shape[-1:]} does not match {spec.n_in}")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, x)
    h = x
    layers = list(spec.layers())
    for i, (w, b, fo, fi) in enumerate(layers):
        h = h @ params[w].reshape(fo, fi).T + params[b]
        if i < len(layers) - 1:
            h = _act(spec.activation, h)
    return h


def mlp_vjp(spec: MlpSpec, params: np.ndarray, x, cotangent):
    """Return ``(v^T dF/dx, v^T dF/dparams)`` by a reverse sweep over the layers."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(cotangent, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, x)
    if v.shape[:-1] != x.shape[:-1] or v.shape[-1] != spec.n_out:
        raise DimensionError(f"cotangent shape {v.shape} does not match output width {spec.n_out}")
    layers = list(spec.layers())
    inputs, pre = [], []
    h = x
    for i, (w, b, fo, fi) in enumerate(layers):
        inputs.append(h)
        z = h @ params[w].reshape(fo, fi).T + params[b]
        pre.append(z)
        h = _act(spec.activation, z) if i < len(layers) - 1 else z
    grad = np.zeros_like(params)
    g = v
    for i in range(len(layers) - 1, -1, -1):
        w, b, fo, fi = layers[i]
        if i < len(layers) - 1:
            z = pre[i]
            g = g * _act_grad(spec.activation, z, _act(spec.activation, z))
        hin = inputs[i]
        if g.ndim == 1:
            grad[w] = np.outer(g, hin).ravel()
            grad[b] = g
        else:
            grad[w] = (g.T @ hin).ravel()
            grad[b] = g.sum(axis=0)
        g = g @ params[w].reshape(fo, fi)
    return g, grad


def finite_diff_jacobian(f: Callable, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, one column per input coordinate."""
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += eps
        xm.flat[j] -= eps
        fp = np.atleast_1d(np.asarray(f(xp), dtype=np.float64))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=np.float64))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericError(f"non-finite function value near coordinate {j}")
        # divide by the realized step, which is exact in floating point
        cols.append((fp - fm).ravel() / (xp.flat[j] - xm.flat[j]))
    return np.stack(cols, axis=1)


# ParamVector files: one JSON header line, then raw little-endian float64 values.

def save_params(path, params, spec: MlpSpec, n_delays: int = 0, extra: dict | None = None) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    if params.size != spec.n_params + n_delays:
        raise DimensionError("parameter count does not match spec and delay count")
    header = {"spec": spec.to_dict(), "n_delays": int(n_delays), "count": int(params.size)}
    if extra:
        header.update(extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.tobytes())
    tmp.replace(path)


def load_params(path):
    """Return ``(params, spec, header)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read parameter file {path}: {exc}") from exc
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
        spec = MlpSpec.from_dict(header["spec"])
        count = int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"corrupt parameter header in {path}") from exc
    body = raw[nl + 1:]
    if len(body) != count * struct.calcsize("<d"):
        raise DataFormatError(f"parameter payload in {path} has wrong length")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if params.size != spec.n_params + int(header.get("n_delays", 0)):
        raise DataFormatError("parameter count disagrees with header spec")
    return params, spec, header
