"""Metric-space vocabulary: spaces, sampled curves, divisions and the
variation functional used to replace ``d/dt C`` along non-smooth curves.

Every other module talks in these terms.  A concrete space (see
:mod:`dualflow.spaces`) only has to provide a distance and a way to map its
points to flat rows of floats; geodesic interpolation and perturbation
sampling are optional extras.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import OutOfDomainError

Point = Any

# relative slack when deciding whether a query time is inside a curve's range
_TIME_SLACK = 1e-12


class MetricSpace:
    """Base class for the metric spaces a dual flow can live on.

    Subclasses must implement :meth:`distance`, :meth:`to_row` and
    :meth:`from_row`.  Everything else has a sensible default or raises
    ``NotImplementedError`` when the space lacks the structure.
    """

    #: prefix of the CSV column names (``point_dim`` or ``particle``)
    column_prefix = "point_dim"

    def distance(self, a: Point, b: Point) -> float:
        raise NotImplementedError

    def prox_distance(self, a: Point, b: Point) -> float:
        """Distance used inside proximal steps.  Defaults to :meth:`distance`."""
        return self.distance(a, b)

    @property
    def has_geodesic(self) -> bool:
        return type(self).interpolate is not MetricSpace.interpolate

    def interpolate(self, a: Point, b: Point, s: float) -> Point:
        raise NotImplementedError(f"{type(self).__name__} has no geodesic interpolation")

    def to_row(self, p: Point) -> np.ndarray:
        raise NotImplementedError

    def from_row(self, row: Sequence[float]) -> Point:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> Point:
        raise NotImplementedError

    def directions(self, p: Point, rng: np.random.Generator, count: int,
                   hint: np.ndarray | None = None) -> list[np.ndarray]:
        """Perturbation directions in row coordinates, used by slope estimation.

        ``hint`` is a (finite-difference) gradient of the loss in row
        coordinates; spaces may use it to add a steepest-descent candidate.
        """
        dim = len(self.to_row(p))
        dirs = [rng.standard_normal(dim) for _ in range(count)]
        if hint is not None and np.any(hint):
            dirs.append(-np.asarray(hint, dtype=float))
        return dirs

    def displace(self, p: Point, direction: np.ndarray, radius: float) -> Point:
        """Move ``p`` along a row-coordinate direction so that the result sits
        at distance ``radius`` (exactly for normed spaces, approximately
        otherwise; callers divide by the measured distance anyway)."""
        row = self.to_row(p)
        probe = self.from_row(row + direction)
        d = self.distance(p, probe)
        if d == 0.0:
            return p
        return self.from_row(row + direction * (radius / d))


@dataclass(frozen=True)
class Curve:
    """A curve ``t -> x_t`` known through samples, optionally with an exact
    evaluator and an exact metric-derivative override."""

    times: np.ndarray
    points: tuple
    space: MetricSpace
    evaluator: Callable[[float], Point] | None = field(default=None, compare=False)
    speed: Callable[[float], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", tuple(self.points))
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("a curve needs at least two samples")
        if len(times) != len(self.points):
            raise ValueError("times and points differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("curve times must be strictly increasing")

    @classmethod
    def from_function(cls, fn: Callable[[float], Point], times: Sequence[float],
                      space: MetricSpace, speed: Callable[[float], float] | None = None) -> "Curve":
        times = np.asarray(times, dtype=float)
        return cls(times, tuple(fn(float(t)) for t in times), space, evaluator=fn, speed=speed)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def _slack(self) -> float:
        return _TIME_SLACK * max(1.0, abs(self.t_start), abs(self.t_end))

    def contains(self, t: float) -> bool:
        s = self._slack()
        return self.t_start - s <= t <= self.t_end + s

    def at(self, t: float) -> Point:
        """Point at time ``t``: exact if an evaluator exists, otherwise the
        nearest stored sample (never a silent interpolation)."""
        if not self.contains(t):
            raise OutOfDomainError(f"t={t} outside [{self.t_start}, {self.t_end}]")
        if self.evaluator is not None:
            return self.evaluator(float(t))
        return self.points[self.nearest_index(t)]

    def nearest_index(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i == 0:
            return 0
        if i >= len(self.times):
            return len(self.times) - 1
        return i if self.times[i] - t < t - self.times[i - 1] else i - 1

    def to_csv(self, path) -> None:
        write_curves_csv(path, [self], prefixes=[""])

    @classmethod
    def from_csv(cls, path, space: MetricSpace) -> "Curve":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "t":
                raise ValueError(f"{path}: first column must be 't'")
            rows = [[float(v) for v in r] for r in reader if r]
        data = np.array(rows, dtype=float)
        return cls(data[:, 0], tuple(space.from_row(r) for r in data[:, 1:]), space)


@dataclass(frozen=True)
class CurvePair:
    """The two components ``z = (x, y)`` of a curve in ``X x Y``."""

    x: Curve
    y: Curve

    @property
    def t_start(self) -> float:
        return max(self.x.t_start, self.y.t_start)

    @property
    def t_end(self) -> float:
        return min(self.x.t_end, self.y.t_end)

    def at(self, t: float) -> tuple[Point, Point]:
        return self.x.at(t), self.y.at(t)

    @classmethod
    def from_function(cls, fn: Callable[[float], tuple[Point, Point]], times: Sequence[float],
                      space_x: MetricSpace, space_y: MetricSpace) -> "CurvePair":
        times = np.asarray(times, dtype=float)
        pts = [fn(float(t)) for t in times]
        return cls(
            Curve(times, tuple(p[0] for p in pts), space_x, evaluator=lambda t: fn(t)[0]),
            Curve(times, tuple(p[1] for p in pts), space_y, evaluator=lambda t: fn(t)[1]),
        )

    def to_csv(self, path) -> None:
        write_curves_csv(path, [self.x, self.y], prefixes=["x_", "y_"])


def _fmt(v: float) -> str:
    return repr(float(v))


def write_curves_csv(path, curves: Sequence[Curve], prefixes: Sequence[str]) -> None:
    """Write curves sharing a time grid side by side; header row mandatory."""
    times = curves[0].times
    for c in curves[1:]:
        if len(c.times) != len(times) or np.any(c.times != times):
            raise ValueError("curves written to one CSV must share their sample times")
    header = ["t"]
    rows = [[_fmt(t)] for t in times]
    for c, prefix in zip(curves, prefixes):
        width = len(c.space.to_row(c.points[0]))
        header += [f"{prefix}{c.space.column_prefix}_{j}" for j in range(width)]
        for row, p in zip(rows, c.points):
            row.extend(_fmt(v) for v in c.space.to_row(p))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass(frozen=True)
class Division:
    """A division ``a = t_0 < t_1 < ... < t_N = b`` of an interval."""

    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or len(knots) < 2:
            raise ValueError("a division needs at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("division knots must be strictly increasing")

    @classmethod
    def uniform(cls, a: float, b: float, mesh: float) -> "Division":
        """Uniform division of ``[a, b]`` whose mesh does not exceed ``mesh``."""
        n = max(1, math.ceil((b - a) / mesh - 1e-9))
        return cls(np.linspace(a, b, n + 1))

    @property
    def a(self) -> float:
        return float(self.knots[0])

    @property
    def b(self) -> float:
        return float(self.knots[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.knots)))

    def __len__(self) -> int:
        return len(self.knots)


def metric_derivative(curve: Curve, r: float, h: float | None = None) -> float:
    """Metric derivative ``|x'_r|`` of a curve.

    An exact ``speed`` override wins.  Curves with an evaluator use the
    symmetric quotient ``d(x_{r+h}, x_{r-h}) / 2h`` (``h`` defaults to 1e-4);
    purely sampled curves use the nearest samples strictly bracketing ``r``.
    """
    if not (curve.t_start < r < curve.t_end):
        raise OutOfDomainError(f"r={r} not strictly inside ({curve.t_start}, {curve.t_end})")
    if curve.speed is not None:
        return float(curve.speed(r))
    d = curve.space.distance
    if curve.evaluator is not None:
        h = 1e-4 if h is None else h
        h = min(h, r - curve.t_start, curve.t_end - r)
        return d(curve.evaluator(r + h), curve.evaluator(r - h)) / (2 * h)
    times = curve.times
    hi = int(np.searchsorted(times, r, side="right"))
    lo = int(np.searchsorted(times, r, side="left")) - 1
    return d(curve.points[hi], curve.points[lo]) / (times[hi] - times[lo])


def _knot_values(division: Division, curves: CurvePair):
    for t in (division.a, division.b):
        if not (curves.x.contains(t) and curves.y.contains(t)):
            raise OutOfDomainError(f"division knot {t} outside the curves' common range")
    xs = [curves.x.at(t) for t in division.knots]
    ys = [curves.y.at(t) for t in division.knots]
    return xs, ys


def upsilon_x(division: Division, curves: CurvePair, functional) -> float:
    """Sum of ``C^x(x_{t_{k+1}}, y_{t_k}) - C^x(x_{t_k}, y_{t_k})`` over the division."""
    xs, ys = _knot_values(division, curves)
    return _upsilon_x_sum(xs, ys, functional)


def upsilon_y(division: Division, curves: CurvePair, functional, convention: str = "left") -> float:
    """Variation of ``C^y`` along the curve with the first player frozen.

    ``convention="left"`` freezes ``x`` at the left knot (mirror image of
    :func:`upsilon_x`); ``"lagged"`` uses the right-knot ``x``, i.e. the
    already-updated first player as in the alternating scheme.
    """
    xs, ys = _knot_values(division, curves)
    return _upsilon_y_sum(xs, ys, functional, convention)


def _upsilon_x_sum(xs, ys, functional) -> float:
    total = 0.0
    for k in range(len(xs) - 1):
        total += functional.eval_x(xs[k + 1], ys[k]) - functional.eval_x(xs[k], ys[k])
    return total


def _upsilon_y_sum(xs, ys, functional, convention: str) -> float:
    if convention not in ("left", "lagged"):
        raise ValueError(f"unknown convention {convention!r}")
    shift = 0 if convention == "left" else 1
    total = 0.0
    for k in range(len(xs) - 1):
        xf = xs[k + shift]
        total += functional.eval_y(xf, ys[k + 1]) - functional.eval_y(xf, ys[k])
    return total


def upsilon(division: Division, curves: CurvePair, functional, convention: str = "left") -> float:
    xs, ys = _knot_values(division, curves)
    return _upsilon_x_sum(xs, ys, functional) + _upsilon_y_sum(xs, ys, functional, convention)


@dataclass(frozen=True)
class UpsilonResult:
    value: float
    meshes: tuple[float, ...]
    values: tuple[float, ...]
    converged: bool


def upsilon_refined(curves: CurvePair, functional, a: float, b: float,
                    mesh_schedule: Sequence[float] = (0.1, 0.05, 0.025),
                    tol: float = 1e-3, convention: str = "left") -> UpsilonResult:
    """Approximate the liminf over divisions by uniform refinement.

    Returns the value on the finest mesh together with the whole sequence;
    ``converged`` is set when the last two values differ by less than ``tol``.
    """
    if not (curves.x.contains(a) and curves.y.contains(b) and curves.y.contains(a)
            and curves.x.contains(b)):
        raise OutOfDomainError(f"[{a}, {b}] not inside the curves' common range")
    meshes, values = [], []
    for m in mesh_schedule:
        div = Division.uniform(a, b, m)
        meshes.append(div.mesh)
        values.append(upsilon(div, curves, functional, convention))
    converged = len(values) >= 2 and abs(values[-1] - values[-2]) < tol
    return UpsilonResult(values[-1], tuple(meshes), tuple(values), converged)
