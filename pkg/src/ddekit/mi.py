"""Delayed mutual information ``I((g[n-p1], g[n-p2]); g[n])`` with histogram estimates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


def equal_width_bins(x: np.ndarray, bins: int) -> np.ndarray | None:
    """Bin index of each sample over its observed range, or None for a constant series."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        return None
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _mi_from_bins(bx, by, bz, bins: int) -> float:
    joint = np.bincount((bx * bins + by) * bins + bz, minlength=bins ** 3).astype(np.float64)
    p = joint.reshape(bins * bins, bins) / bx.size
    pxy = p.sum(axis=1, keepdims=True)
    pz = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pxy * pz)[nz])))


def _aligned(b: np.ndarray, p1: int, p2: int):
    m = max(p1, p2)
    n = b.size
    return b[m - p1:n - p1], b[m - p2:n - p2], b[m:]


def _check(series: np.ndarray, lags, bins: int) -> None:
    if bins < 4:
        raise ConfigurationError("need at least 4 bins")
    if min(lags) < 1:
        raise ConfigurationError("lags must be positive")
    if series.ndim != 1 or series.size <= max(lags) + 1000:
        raise ConfigurationError(f"series needs more than {max(lags) + 1000} samples")


def delayed_mi(series, p1: int, p2: int, bins: int = 16) -> float:
    """MI in nats between the lagged pair and the current value.

    A constant series has no information; it returns 0 and emits a RuntimeWarning.
    """
    s = np.asarray(series, dtype=np.float64)
    _check(s, (p1, p2), bins)
    b = equal_width_bins(s, bins)
    if b is None:
        warnings.warn("constant series: mutual information is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    lo, hi = sorted((int(p1), int(p2)))  # fixed order makes the swap symmetry exact
    return _mi_from_bins(*_aligned(b, lo, hi), bins)


def single_lag_mi(series, p: int, bins: int = 16) -> float:
    """``I(g[n-p]; g[n])``, the one-coordinate counterpart used for sanity checks."""
    s = np.asarray(series, dtype=np.float64)
    _check(s, (p,), bins)
    b = equal_width_bins(s, bins)
    if b is None:
        return 0.0
    x, z = b[:-p], b[p:]
    return _mi_from_bins(x, np.zeros_like(x), z, bins)


@dataclass(frozen=True)
class MiGrid:
    lags: np.ndarray      # shared lag axis for p1 and p2
    values: np.ndarray    # values[i, j] = MI at (lags[i], lags[j])
    bins: int

    @property
    def p_lo(self) -> int:
        return int(self.lags[0])

    @property
    def p_hi(self) -> int:
        return int(self.lags[-1])

    @property
    def stride(self) -> int:
        return int(self.lags[1] - self.lags[0]) if self.lags.size > 1 else 1

    def argmax(self) -> list[tuple[int, int]]:
        """Every lag pair attaining the maximum (both orderings when off-diagonal)."""
        best = self.values.max()
        ii, jj = np.nonzero(self.values == best)
        return [(int(self.lags[i]), int(self.lags[j])) for i, j in zip(ii, jj)]

    def rows(self):
        for i, p1 in enumerate(self.lags):
            for j, p2 in enumerate(self.lags):
                yield int(p1), int(p2), float(self.values[i, j])


def mi_map(series, p_lo: int, p_hi: int, stride: int = 1, bins: int = 16) -> MiGrid:
    """Evaluate :func:`delayed_mi` over the lattice ``p_lo..p_hi`` (step ``stride``) in both lags.

    Bins are computed once for the whole series; the matrix is filled on the
    upper triangle and mirrored, so it is exactly symmetric.
    """
    if stride < 1 or p_hi < p_lo:
        raise ConfigurationError("need stride >= 1 and p_hi >= p_lo")
    s = np.asarray(series, dtype=np.float64)
    lags = np.arange(p_lo, p_hi + 1, stride)
    _check(s, (int(lags[0]), int(lags[-1])), bins)
    vals = np.zeros((lags.size, lags.size))
    b = equal_width_bins(s, bins)
    if b is None:
        warnings.warn("constant series: mutual information is 0", RuntimeWarning, stacklevel=2)
        return MiGrid(lags, vals, bins)
    for i, p1 in enumerate(lags):
        for j in range(i, lags.size):
            vals[i, j] = vals[j, i] = _mi_from_bins(*_aligned(b, int(p1), int(lags[j])), bins)
    return MiGrid(lags, vals, bins)
