"""Finite-difference gradient oracle, independent of the autodiff engine.

The checker only drives forward evaluations of a function of raw numpy
buffers, so it cannot inherit a bug from any backward rule it verifies.
"""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays: list[np.ndarray], step: float = 1e-6,
                       coords: list[list[tuple]] | None = None) -> list[np.ndarray]:
    """Numeric gradient of scalar ``f(arrays)`` w.r.t. each array.

    ``coords`` optionally restricts each array to a subset of index tuples;
    unchecked entries are returned as NaN so callers compare only what was
    actually measured.
    """
    grads = []
    for k, arr in enumerate(arrays):
        if coords is None:
            picked = list(np.ndindex(arr.shape))
        else:
            picked = coords[k]
        g = np.full(arr.shape, np.nan)
        for idx in picked:
            keep = arr[idx]
            arr[idx] = keep + step
            hi = f(arrays)
            arr[idx] = keep - step
            lo = f(arrays)
            arr[idx] = keep
            g[idx] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Vector relative error over the entries the oracle measured."""
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic)[mask].ravel()
    n = np.asarray(numeric)[mask].ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def sample_coords(rng: np.random.Generator, shape: tuple, k: int) -> list[tuple]:
    """Up to ``k`` distinct index tuples of an array shape."""
    total = int(np.prod(shape))
    k = min(k, total)
    flat = rng.choice(total, size=k, replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]
