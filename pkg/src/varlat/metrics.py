"""Latency summary statistics and streaming co-moments.

All variances and covariances use population normalization (divide by n).
The variance tree depends on this: contributions are ratios of population
moments over the same sample set.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import _kernels


def lp_norm(latencies, p: float = 2.0) -> float:
    """``(sum |l_i|^p)^(1/p)``; ``p`` must be at least 1."""
    if not p >= 1:
        raise ValueError(f"L_p norm needs p >= 1, got {p}")
    x = np.abs(np.asarray(latencies, dtype=np.float64))
    if x.size == 0:
        return 0.0
    if math.isinf(p):
        return float(x.max())
    # rescale so large nanosecond values cannot overflow x**p
    m = float(x.max())
    if m == 0.0:
        return 0.0
    return float(m * np.sum((x / m) ** p) ** (1.0 / p))


def percentile(latencies, q: float):
    """Nearest-rank percentile: element ``ceil(q/100 * n)`` (1-based) of the sorted data."""
    if not 0 < q <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {q}")
    x = np.sort(np.asarray(latencies))
    n = x.size
    if n == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(Fraction(str(q)) * n / 100))
    return x[rank - 1].item()


@dataclass
class LatencySummary:
    n: int
    mean_ns: float
    variance_ns2: float
    p99_ns: float
    lp_p: float
    lp_norm: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lp_norm"] = {"p": d.pop("lp_p"), "value": d["lp_norm"]}
        return d


def summarize(latencies, p: float = 2.0) -> LatencySummary:
    x = np.asarray(latencies, dtype=np.float64)
    if x.size == 0:
        return LatencySummary(0, 0.0, 0.0, 0.0, p, 0.0)
    return LatencySummary(
        n=int(x.size),
        mean_ns=float(x.mean()),
        variance_ns2=float(x.var()),
        p99_ns=float(percentile(x, 99)),
        lp_p=p,
        lp_norm=lp_norm(x, p),
    )


class CoMoment:
    """One-pass mean and centered cross-product accumulator for a fixed set of columns.

    Rows are first shifted by the first row ever seen (``shift``), which keeps
    large nanosecond offsets out of the arithmetic. Each shifted row ``x``
    then updates ``mean`` and ``cxp`` with the multivariate Welford recurrence::

        d = x - mean_old;  mean = mean_old + d / n;  cxp += outer(d, x - mean)

    Accumulators over disjoint shards combine with :meth:`merge`::

        cxp = cxp_a + cxp_b + outer(delta, delta) * n_a * n_b / n

    where ``delta = mean_b - mean_a`` (both expressed against one shift).
    """

    def __init__(self, k: int):
        self.k = k
        self.n = 0
        self.shift = None
        self._mean = np.zeros(k)  # relative to shift
        self.cxp = np.zeros((k, k))

    @property
    def mean(self) -> np.ndarray:
        return self._mean if self.shift is None else self._mean + self.shift

    def update(self, rows) -> "CoMoment":
        X = np.asarray(rows, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.k:
            raise ValueError(f"expected {self.k} columns, got {X.shape[1]}")
        if X.shape[0] == 0:
            return self
        if self.shift is None:
            self.shift = X[0].copy()
        self.n = _kernels.comoment_update(self.n, self._mean, self.cxp, X - self.shift)
        return self

    def merge(self, other: "CoMoment") -> "CoMoment":
        """Combined accumulator of both shards (neither input is modified)."""
        if other.k != self.k:
            raise ValueError("column count mismatch")
        if other.n == 0 or self.n == 0:
            src = self if other.n == 0 else other
            out = CoMoment(self.k)
            out.n, out.cxp = src.n, src.cxp.copy()
            out.shift = None if src.shift is None else src.shift.copy()
            out._mean = src._mean.copy()
            return out
        out = CoMoment(self.k)
        n = self.n + other.n
        out.n = n
        out.shift = self.shift.copy()
        other_mean = other._mean + (other.shift - self.shift)
        delta = other_mean - self._mean
        out._mean = self._mean + delta * (other.n / n)
        out.cxp = self.cxp + other.cxp + np.outer(delta, delta) * (self.n * other.n / n)
        return out

    def covariance(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("covariance needs at least 2 rows")
        c = self.cxp / self.n
        return (c + c.T) / 2.0


def covariance_matrix(samples) -> np.ndarray:
    """Population covariance of the columns of ``samples`` (rows are observations)."""
    X = np.asarray(getattr(samples, "values", samples), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("covariance needs a 2-D sample with at least 2 rows")
    return CoMoment(X.shape[1]).update(X).covariance()


def covariance_two_pass(samples) -> np.ndarray:
    """Reference two-pass computation (shifted by the first row, then centered)."""
    X = np.asarray(getattr(samples, "values", samples), dtype=np.float64)
    X = X - X[0]
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / X.shape[0]
