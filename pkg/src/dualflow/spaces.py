"""Concrete metric spaces: Euclidean vectors, 1D empirical measures under
Wasserstein distances, and Lipschitz functions sampled on a uniform grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (GridMismatchError, InfeasibleError, OutOfDomainError,
                     UnsupportedConfigurationError)
from .metric import MetricSpace
from .transport import transport_lp

# slack on the Lipschitz increment test, absorbs float rounding
LIP_SLACK = 1e-12


# --------------------------------------------------------------------------
# Euclidean vectors


class EuclideanSpace(MetricSpace):
    """``R^dim`` with the Euclidean norm.  Points are 1D float arrays."""

    def __init__(self, dim: int, box: float = 1.0):
        self.dim = int(dim)
        self.box = float(box)

    def __repr__(self):
        return f"EuclideanSpace(dim={self.dim})"

    def distance(self, a, b) -> float:
        return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))

    def interpolate(self, a, b, s):
        a = np.asarray(a, dtype=float)
        return a + s * (np.asarray(b, dtype=float) - a)

    def to_row(self, p):
        return np.asarray(p, dtype=float).reshape(-1)

    def from_row(self, row):
        return np.asarray(row, dtype=float).copy()

    def sample(self, rng):
        return rng.uniform(-self.box, self.box, self.dim)

    def directions(self, p, rng, count, hint=None):
        dirs = [rng.standard_normal(self.dim) for _ in range(count)]
        eye = np.eye(self.dim)
        dirs += list(eye) + list(-eye)
        if hint is not None and np.any(hint):
            dirs.append(-np.asarray(hint, dtype=float))
        return dirs

    def displace(self, p, direction, radius):
        n = np.linalg.norm(direction)
        if n == 0.0:
            return np.asarray(p, dtype=float)
        return np.asarray(p, dtype=float) + direction * (radius / n)


# --------------------------------------------------------------------------
# empirical measures on the line


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform-weight empirical measure ``(1/M) sum_i delta_{particles_i}``."""

    particles: np.ndarray

    def __post_init__(self):
        p = np.array(self.particles, dtype=float).reshape(-1)
        if p.size < 1:
            raise ValueError("an empirical measure needs at least one particle")
        if not np.all(np.isfinite(p)):
            raise ValueError("particles must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "particles", p)

    @property
    def size(self) -> int:
        return self.particles.size

    def sorted(self) -> np.ndarray:
        return np.sort(self.particles)

    def __eq__(self, other):
        return isinstance(other, EmpiricalMeasure) and np.array_equal(self.particles, other.particles)

    def __hash__(self):
        return hash(self.particles.tobytes())


@dataclass(frozen=True)
class WeightedMeasure:
    """Finitely supported measure with arbitrary nonnegative weights."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if s.shape != w.shape:
            raise ValueError("support and weights differ in length")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_empirical(cls, mu: EmpiricalMeasure) -> "WeightedMeasure":
        return cls(mu.particles, np.full(mu.size, 1.0 / mu.size))


def _check_same_size(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.size != nu.size:
        raise UnsupportedConfigurationError(
            f"sorting distance needs equal particle counts ({mu.size} vs {nu.size}); "
            "use w1_distance_lp for general weights")


def w1_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact 1D Wasserstein-1 distance by sorted matching."""
    _check_same_size(mu, nu)
    return float(np.mean(np.abs(mu.sorted() - nu.sorted())))


def w2_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    _check_same_size(mu, nu)
    return float(np.sqrt(np.mean((mu.sorted() - nu.sorted()) ** 2)))


def w1_distance_lp(mu, nu, tol: float = 1e-9) -> float:
    """Wasserstein-1 distance between weighted measures via the transport LP."""
    mu = mu if isinstance(mu, WeightedMeasure) else WeightedMeasure.from_empirical(mu)
    nu = nu if isinstance(nu, WeightedMeasure) else WeightedMeasure.from_empirical(nu)
    if abs(mu.weights.sum() - 1.0) > tol or abs(nu.weights.sum() - 1.0) > tol:
        raise InfeasibleError("weights must each sum to one")
    cost = np.abs(mu.support[:, None] - nu.support[None, :])
    value, _ = transport_lp(mu.weights, nu.weights, cost, tol=tol)
    return value


class MeasureSpace(MetricSpace):
    """Uniform-weight empirical measures with ``M`` particles.

    ``order`` selects the reported distance (W1 or W2); ``prox_order`` the
    one used in proximal steps.  W2 makes the generator prox separable over
    sorted particles.
    """

    column_prefix = "particle"

    def __init__(self, M: int, order: int = 1, prox_order: int = 2,
                 lo: float = 0.0, hi: float = 1.0):
        if order not in (1, 2) or prox_order not in (1, 2):
            raise ValueError("Wasserstein order must be 1 or 2")
        self.M = int(M)
        self.order = order
        self.prox_order = prox_order
        self.lo, self.hi = float(lo), float(hi)

    def __repr__(self):
        return f"MeasureSpace(M={self.M}, order={self.order}, prox_order={self.prox_order})"

    def _dist(self, a, b, order):
        return w1_distance(a, b) if order == 1 else w2_distance(a, b)

    def distance(self, a, b) -> float:
        return self._dist(a, b, self.order)

    def prox_distance(self, a, b) -> float:
        return self._dist(a, b, self.prox_order)

    def interpolate(self, a, b, s):
        # displacement interpolation between sorted particles
        return EmpiricalMeasure((1.0 - s) * a.sorted() + s * b.sorted())

    def to_row(self, p):
        return np.asarray(p.particles, dtype=float)

    def from_row(self, row):
        return EmpiricalMeasure(row)

    def sample(self, rng):
        return EmpiricalMeasure(rng.uniform(self.lo, self.hi, self.M))

    def displace(self, p, direction, radius):
        # particles stay inside [lo, hi]; the distance may then fall short of radius
        moved = super().displace(p, direction, radius)
        return EmpiricalMeasure(np.clip(moved.particles, self.lo, self.hi))

    def directions(self, p, rng, count, hint=None):
        dirs = [rng.standard_normal(self.M) for _ in range(count)]
        eye = np.eye(self.M)
        dirs += list(eye) + list(-eye)
        if hint is not None and np.any(hint):
            dirs.append(-np.asarray(hint, dtype=float))
        return dirs


# --------------------------------------------------------------------------
# grid Lipschitz functions


@dataclass(frozen=True)
class Grid:
    """Uniform knots ``lo = g_0 < ... < g_{K-1} = hi``."""

    lo: float
    hi: float
    K: int

    def __post_init__(self):
        if self.K < 2 or not self.hi > self.lo:
            raise ValueError("a grid needs K >= 2 knots on a nondegenerate interval")

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.K)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.K - 1)

    @classmethod
    def around(cls, points: Sequence[float], K: int = 101, pad: float = 0.1) -> "Grid":
        """Grid on the bounding interval of ``points`` padded by ``pad`` times its width."""
        pts = np.asarray(points, dtype=float)
        lo, hi = float(pts.min()), float(pts.max())
        width = max(hi - lo, 1e-3)
        return cls(lo - pad * width, hi + pad * width, K)

    def interp_weights(self, particles) -> np.ndarray:
        """Vector ``w`` with ``mean_i f(particles_i) = <w, f.values>`` for
        piecewise-linear ``f`` on this grid."""
        x = np.asarray(particles, dtype=float).reshape(-1)
        idx, frac = self._locate(x)
        w = np.zeros(self.K)
        np.add.at(w, idx, (1.0 - frac) / x.size)
        np.add.at(w, idx + 1, frac / x.size)
        return w

    def _locate(self, x):
        slack = 1e-12 * max(1.0, abs(self.lo), abs(self.hi))
        if np.any(x < self.lo - slack) or np.any(x > self.hi + slack):
            raise OutOfDomainError(f"points outside the grid [{self.lo}, {self.hi}]")
        u = (np.clip(x, self.lo, self.hi) - self.lo) / self.spacing
        idx = np.minimum(np.floor(u).astype(int), self.K - 2)
        return idx, u - idx


def lipschitz_constant(values, spacing: float) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.max(np.abs(np.diff(values)))) / spacing


@dataclass(frozen=True)
class GridLipschitzFunction:
    """Piecewise-linear function given by its values at the grid knots."""

    grid: Grid
    values: np.ndarray
    lip_bound: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.K:
            raise ValueError(f"expected {self.grid.K} knot values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("knot values must be finite")
        if not self.lip_bound > 0:
            raise ValueError("lip_bound must be positive")
        if np.any(np.abs(np.diff(v)) > self.lip_bound * self.grid.spacing + LIP_SLACK):
            raise ValueError("values violate the Lipschitz bound; use project_lipschitz")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx, frac = self.grid._locate(x.reshape(-1))
        out = (1.0 - frac) * self.values[idx] + frac * self.values[idx + 1]
        return out.reshape(x.shape) if x.ndim else float(out[0])

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / self.grid.spacing

    def slope_at(self, x) -> np.ndarray:
        idx, _ = self.grid._locate(np.asarray(x, dtype=float).reshape(-1))
        return self.slopes[idx]

    def __eq__(self, other):
        return (isinstance(other, GridLipschitzFunction) and self.grid == other.grid
                and self.lip_bound == other.lip_bound and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.grid, self.lip_bound, self.values.tobytes()))


def lip_distance(f: GridLipschitzFunction, g: GridLipschitzFunction) -> float:
    """Sup norm plus discrete Lipschitz seminorm of ``f - g``."""
    if f.grid != g.grid:
        raise GridMismatchError("grid functions live on different grids")
    diff = f.values - g.values
    return float(np.max(np.abs(diff))) + lipschitz_constant(diff, f.grid.spacing)


def expectation(f: GridLipschitzFunction, mu: EmpiricalMeasure) -> float:
    """Average of ``f`` under ``mu``; particles outside the grid are an error."""
    return float(np.mean(f(mu.particles)))


def project_lipschitz(values, grid: Grid, lip_bound: float = 1.0) -> GridLipschitzFunction:
    """Nearest ``lip_bound``-Lipschitz grid function in the sup norm.

    The answer is the midpoint of the smallest Lipschitz majorant and the
    largest Lipschitz minorant, each obtained by a forward and a backward
    increment-clipping sweep.  Feasible input is returned unchanged.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    c = lip_bound * grid.spacing
    if np.all(np.abs(np.diff(v)) <= c + LIP_SLACK):
        return GridLipschitzFunction(grid, v, lip_bound)
    upper = v.copy()
    lower = v.copy()
    for i in range(1, v.size):
        upper[i] = max(upper[i], upper[i - 1] - c)
        lower[i] = min(lower[i], lower[i - 1] + c)
    for i in range(v.size - 2, -1, -1):
        upper[i] = max(upper[i], upper[i + 1] - c)
        lower[i] = min(lower[i], lower[i + 1] + c)
    mid = 0.5 * (upper + lower)
    # midpoint of two c-Lipschitz sequences is c-Lipschitz up to rounding
    return GridLipschitzFunction(grid, mid, lip_bound)


class GridFunctionSpace(MetricSpace):
    """Grid functions under :func:`lip_distance`.

    The space contains functions of any Lipschitz constant; ``lip_bound`` is
    the admissible constant enforced on discriminators by the proximal step.
    Proximal steps use the quadratic metric ``prox_metric``: ``"h1"`` (squared
    values plus squared slopes, a Hilbert surrogate of the Lipschitz
    distance) or ``"l2"``.  Set ``constrain_perturbations`` to keep slope
    probes inside the admissible set.
    """

    def __init__(self, grid: Grid, lip_bound: float = 1.0, prox_metric: str = "h1",
                 constrain_perturbations: bool = False):
        if prox_metric not in ("h1", "l2"):
            raise ValueError(f"unknown prox metric {prox_metric!r}")
        self.grid = grid
        self.lip_bound = float(lip_bound)
        self.prox_metric = prox_metric
        self.constrain_perturbations = constrain_perturbations
        h = grid.spacing
        D = np.diff(np.eye(grid.K), axis=0)
        A = h * np.eye(grid.K)
        if prox_metric == "h1":
            A = A + (D.T @ D) / h
        self.prox_matrix = A
        # knot values = basis @ (first value, increments); R^T R = A
        basis = np.hstack([np.ones((grid.K, 1)), np.tril(np.ones((grid.K, grid.K - 1)), -1)])
        R = np.linalg.cholesky(A).T
        hess = basis.T @ A @ basis
        self.prox_factor = (basis, R, R @ basis, float(np.linalg.eigvalsh(hess)[-1]))

    def __repr__(self):
        return f"GridFunctionSpace({self.grid}, lip_bound={self.lip_bound}, prox_metric={self.prox_metric!r})"

    def distance(self, a, b) -> float:
        return lip_distance(a, b)

    def prox_distance(self, a, b) -> float:
        if a.grid != b.grid:
            raise GridMismatchError("grid functions live on different grids")
        d = a.values - b.values
        return float(np.sqrt(max(d @ self.prox_matrix @ d, 0.0)))

    def interpolate(self, a, b, s):
        return self.from_row((1.0 - s) * a.values + s * b.values)

    def to_row(self, p):
        return np.asarray(p.values, dtype=float)

    def from_row(self, row):
        row = np.asarray(row, dtype=float)
        lip = max(self.lip_bound, lipschitz_constant(row, self.grid.spacing) * (1 + 1e-12))
        return GridLipschitzFunction(self.grid, row, lip)

    def admissible(self, values) -> GridLipschitzFunction:
        return project_lipschitz(values, self.grid, self.lip_bound)

    def sample(self, rng):
        c = self.lip_bound * self.grid.spacing
        inc = rng.uniform(-c, c, self.grid.K - 1)
        values = rng.uniform(-1.0, 1.0) + np.concatenate([[0.0], np.cumsum(inc)])
        return project_lipschitz(values, self.grid, self.lip_bound)

    def directions(self, p, rng, count, hint=None):
        K, h = self.grid.K, self.grid.spacing
        dirs = []
        for k in range(count):
            kind = k % 3
            if kind == 0:
                dirs.append(rng.standard_normal(K))
            elif kind == 1:
                dirs.append(np.concatenate([[0.0], np.cumsum(rng.standard_normal(K - 1))]))
            else:
                i, j = sorted(rng.choice(K, size=2, replace=False))
                ramp = np.interp(np.arange(K), [i, j], [1.0, -1.0])
                dirs.append(ramp)
        dirs.append(np.ones(K))
        dirs.append(-np.ones(K))
        if hint is not None and np.any(hint):
            w = -np.asarray(hint, dtype=float)
            dirs.append(w)
            # steepest direction for the sup + Lipschitz norm: increments
            # follow the sign of the tail sums of the descent vector
            tails = np.cumsum(w[::-1])[::-1][1:]
            v = np.concatenate([[0.0], np.cumsum(h * np.sign(tails))])
            v -= 0.5 * (v.max() + v.min())
            if np.any(v):
                dirs.append(v)
        return dirs

    def displace(self, p, direction, radius):
        direction = np.asarray(direction, dtype=float)
        norm = float(np.max(np.abs(direction))) + lipschitz_constant(direction, self.grid.spacing)
        if norm == 0.0:
            return p
        values = p.values + direction * (radius / norm)
        if self.constrain_perturbations:
            return project_lipschitz(values, self.grid, p.lip_bound)
        return self.from_row(values)
