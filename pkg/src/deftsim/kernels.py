"""Flat gradient-vector kernels: L2 norms and deterministic top-k selection.

Index sets are plain sorted int64 arrays throughout the package; these
kernels are the only place selection order is decided, so tie-breaking
lives here (largest magnitude first, lowest index on ties).
"""

from __future__ import annotations

import numpy as np


def l2_norm(values: np.ndarray) -> float:
    """L2 norm of a non-empty slice."""
    if values.size == 0:
        raise ValueError("empty slice")
    return float(np.sqrt(np.dot(values, values)))


def segment_norms(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """L2 norm of each contiguous segment; ``starts`` are segment offsets.

    Equivalent to ``[l2_norm(values[s:e]) for s, e in pairs]`` but one pass.
    """
    return np.sqrt(np.add.reduceat(values * values, starts))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest-magnitude entries, sorted ascending.

    Ties are broken toward the lower index so the result is a pure
    function of the input (no dependence on partition internals).
    """
    n = values.size
    if k < 1 or k > n:
        raise ValueError("invalid k")
    if k == n:
        return np.arange(n, dtype=np.int64)

    mag = np.abs(values)
    part = np.argpartition(mag, n - k)[n - k:]
    cutoff = mag[part].min()

    above = np.flatnonzero(mag > cutoff)
    need = k - above.size
    if need > 0:
        at_cutoff = np.flatnonzero(mag == cutoff)[:need]
        above = np.concatenate([above, at_cutoff])
    out = np.sort(above).astype(np.int64, copy=False)
    return out


def is_index_set(indices: np.ndarray, n_total: int) -> bool:
    """True when ``indices`` is strictly increasing and within [0, n_total)."""
    if indices.size == 0:
        return True
    if indices[0] < 0 or indices[-1] >= n_total:
        return False
    return bool(np.all(np.diff(indices) > 0))
