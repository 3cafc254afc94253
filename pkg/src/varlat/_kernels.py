"""Numeric inner loops, with a numba path and a pure-numpy path.

Set ``VARLAT_NO_JIT=1`` to force the numpy path (it is also used when numba
cannot be imported). Both paths are always importable by name so the
benchmark and the equivalence tests can call them side by side.
"""
from __future__ import annotations

import os

import numpy as np

FCFS, ELDEST, RANDOM = 0, 1, 2

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_JIT = HAVE_NUMBA and os.environ.get("VARLAT_NO_JIT", "").strip() not in ("1", "true", "yes")
BACKEND = "numba" if USE_JIT else "numpy"


# -- streaming co-moments ---------------------------------------------------

def comoment_update_np(n, mean, cxp, X):
    """Fold the rows of ``X`` into ``(n, mean, cxp)``; returns the new ``n``.

    ``cxp`` is the centered cross-product sum, ``sum (x - mean)(x - mean)^T``.
    The batch is reduced with a centered two-pass and merged with the pairwise
    (Chan et al.) update, so each row is still visited once by the caller.
    """
    m = X.shape[0]
    if m == 0:
        return n
    bmean = X.mean(axis=0)
    Xc = X - bmean
    bcxp = Xc.T @ Xc
    tot = n + m
    delta = bmean - mean
    cxp += bcxp + np.outer(delta, delta) * (n * m / tot)
    mean += delta * (m / tot)
    return tot


def _comoment_update_py(n, mean, cxp, X):
    k = X.shape[1]
    d = np.empty(k)
    for r in range(X.shape[0]):
        n += 1
        for i in range(k):
            d[i] = X[r, i] - mean[i]
            mean[i] += d[i] / n
        for i in range(k):
            e = X[r, i] - mean[i]
            for j in range(k):
                cxp[j, i] += d[j] * e
    return n


# -- single-queue menu Monte Carlo -----------------------------------------

def menu_lp_np(ages, arrivals, remaining, keys, policy, p):
    """Per-trial L_p norm of completed latencies on one exclusive queue.

    ``remaining[t, i]`` is the hold time of the i-th transaction granted in
    trial t. ``keys`` orders the RANDOM policy (smallest first). Arrivals
    must be non-decreasing.
    """
    trials, n = remaining.shape
    arr = arrivals[None, :]
    births = (arrivals - ages)[None, :]
    free = np.full(trials, -np.inf)
    done = np.zeros((trials, n), dtype=bool)
    rows = np.arange(trials)
    lat = np.empty((trials, n))
    for i in range(n):
        pending = ~done
        nxt = np.where(pending, arr, np.inf).min(axis=1)
        free = np.maximum(free, nxt)
        avail = pending & (arr <= free[:, None])
        if policy == FCFS:
            j = np.argmax(avail, axis=1)
        elif policy == ELDEST:
            b = np.where(avail, births, np.inf)
            j = np.argmax(avail & (b == b.min(axis=1)[:, None]), axis=1)
        else:
            kk = np.where(avail, keys, np.inf)
            j = np.argmin(kk, axis=1)
        lat[rows, j] = ages[j] + (free - arrivals[j]) + remaining[:, i]
        done[rows, j] = True
        free = free + remaining[:, i]
    scale = lat.max(axis=1)
    scale[scale == 0] = 1.0
    acc = ((np.abs(lat) / scale[:, None]) ** p).sum(axis=1)
    return acc ** (1.0 / p) * scale


def _menu_lp_py(ages, arrivals, remaining, keys, policy, p):
    trials, n = remaining.shape
    out = np.empty(trials)
    lat = np.empty(n)
    done = np.zeros(n, dtype=np.bool_)
    for t in range(trials):
        for j in range(n):
            done[j] = False
        free = -np.inf
        for i in range(n):
            nxt = np.inf
            for j in range(n):
                if not done[j] and arrivals[j] < nxt:
                    nxt = arrivals[j]
            if nxt > free:
                free = nxt
            best = -1
            for j in range(n):
                if done[j] or arrivals[j] > free:
                    continue
                if best < 0:
                    best = j
                elif policy == ELDEST:
                    if ages[j] - arrivals[j] > ages[best] - arrivals[best]:
                        best = j
                elif policy == RANDOM:
                    if keys[t, j] < keys[t, best]:
                        best = j
            lat[best] = ages[best] + (free - arrivals[best]) + remaining[t, i]
            done[best] = True
            free = free + remaining[t, i]
        scale = 0.0
        for j in range(n):
            if lat[j] > scale:
                scale = lat[j]
        if scale == 0.0:
            scale = 1.0
        s = 0.0
        for j in range(n):
            s += (abs(lat[j]) / scale) ** p
        out[t] = s ** (1.0 / p) * scale
    return out


if HAVE_NUMBA:
    comoment_update_nb = numba.njit(cache=True)(_comoment_update_py)
    menu_lp_nb = numba.njit(cache=True)(_menu_lp_py)
else:  # pragma: no cover
    comoment_update_nb = comoment_update_np
    menu_lp_nb = menu_lp_np


def comoment_update(n, mean, cxp, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if USE_JIT:
        return int(comoment_update_nb(n, mean, cxp, X))
    return comoment_update_np(n, mean, cxp, X)


def menu_lp(ages, arrivals, remaining, keys, policy, p):
    args = (
        np.ascontiguousarray(ages, dtype=np.float64),
        np.ascontiguousarray(arrivals, dtype=np.float64),
        np.ascontiguousarray(remaining, dtype=np.float64),
        np.ascontiguousarray(keys, dtype=np.float64),
        int(policy),
        float(p),
    )
    if USE_JIT:
        return menu_lp_nb(*args)
    return menu_lp_np(*args)
