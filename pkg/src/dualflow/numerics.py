"""Central finite differences."""

from __future__ import annotations

import numpy as np


def fd_step(x, rel_step: float = 1e-6) -> float:
    return rel_step * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def fd_gradient(fn, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel_step)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def fd_jacobian(fn, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, entry ``(i, j) = d fn_i / d x_j``."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel_step)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e), dtype=float) - np.asarray(fn(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
