"""Energy-dissipation-inequality residuals for curves of the dual flow.

For a curve ``z = (x_t, y_t)`` the residual on ``[a, b]`` is::

    Upsilon(z, a, b) + 1/2 int_a^b |x'|^2 + |y'|^2 + 1/2 int_a^b slope_x^2 + slope_y^2

where ``slope_x`` is the slope of ``C^x`` in its first argument and
``slope_y`` the slope of ``C^y`` in its second, both at ``(x_r, y_r)``.  An
equilibrium flow has a nonpositive residual for every ``s``; gradient flows
hit zero exactly.

Everything is evaluated on one uniform node grid of width
``quadrature_mesh``: speeds are per-cell quotients ``d(z_{j+1}, z_j) / h``,
slopes are taken at cell midpoints, and ``Upsilon`` sums the one-sided
increments over the node division.  Every term is a sum over cells, so
residuals over adjacent intervals add up exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functionals import slope_estimate_x, slope_estimate_y
from .metric import CurvePair, _fmt, upsilon_refined
from .schemes import ProxConfig, Trajectory, de_giorgi_interpolate


COMPONENTS = ("upsilon", "speed_x", "speed_y", "slope_x", "slope_y")


@dataclass(frozen=True)
class EDIReport:
    s_grid: tuple
    residuals: tuple
    #: per s: (upsilon, 1/2 int |x'|^2, 1/2 int |y'|^2, 1/2 int slope_x^2, 1/2 int slope_y^2)
    components: tuple
    #: (t, worst residual over [t, s] for s >= t in s_grid)
    tail_residuals: tuple
    edi_tol: float
    quadrature_mesh: float
    slope_failed: bool = False
    upsilon_refinement: dict = field(default_factory=dict, compare=False)

    @property
    def passed(self) -> bool:
        return (not self.slope_failed) and all(r <= self.edi_tol for r in self.residuals)

    def residual_at(self, s: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.s_grid) - s)))
        return self.residuals[i]

    def to_dict(self) -> dict:
        rows = []
        for s, r, comp in zip(self.s_grid, self.residuals, self.components):
            row = {"s": s, "residual": r}
            row.update(dict(zip(COMPONENTS, comp)))
            rows.append(row)
        return {
            "pass": self.passed,
            "edi_tol": self.edi_tol,
            "quadrature_mesh": self.quadrature_mesh,
            "slope_failed": self.slope_failed,
            "per_s": rows,
            "tail_residuals": [{"t": t, "worst_residual": r} for t, r in self.tail_residuals],
            "upsilon_refinement": self.upsilon_refinement,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "upsilon", "speed_int", "slope_int", "residual"])
            for s, r, c in zip(self.s_grid, self.residuals, self.components):
                w.writerow([_fmt(s), _fmt(c[0]), _fmt(c[1] + c[2]), _fmt(c[3] + c[4]), _fmt(r)])


def _as_evaluator(source, functional, config):
    if isinstance(source, Trajectory):
        return (lambda t: de_giorgi_interpolate(source, t, functional, config)), 0.0, source.T
    if isinstance(source, CurvePair):
        return source.at, source.t_start, source.t_end
    if callable(source):
        return source, 0.0, math.inf
    raise TypeError(f"cannot evaluate a curve from {type(source).__name__}")


def _slope(analytic, estimator, f, x, y, rng):
    if analytic is not None:
        return float(analytic(x, y)), False
    try:
        return estimator(f, x, y, rng=rng).value, False
    except Exception:  # estimation failure is reported, not raised
        return float("nan"), True


def edi_residual(source, functional, s_grid: Sequence[float], quadrature_mesh: float,
                 t_grid: Sequence[float] | None = None, edi_tol: float = 1e-2,
                 config: ProxConfig | None = None, rng=None,
                 refine_upsilon: bool = False) -> EDIReport:
    """EDI residual of a curve on ``[0, s]`` for every ``s`` in ``s_grid``.

    ``source`` is a :class:`Trajectory` (evaluated through its de Giorgi
    interpolant), a :class:`CurvePair`, or a callable ``t -> (x, y)``.  The
    node grid starts at 0 with spacing ``quadrature_mesh`` and must hit
    every ``s`` (and every tail time in ``t_grid``, default 8 interior
    points).  With ``refine_upsilon`` the variation on ``[0, max s]`` is
    also recomputed by :func:`upsilon_refined` and stored for comparison.
    """
    config = config or ProxConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    s_grid = tuple(float(s) for s in s_grid)
    if not s_grid or min(s_grid) <= 0:
        raise ValueError("s_grid must contain positive times")
    h = float(quadrature_mesh)
    s_max = max(s_grid)
    n = int(round(s_max / h))
    if n < 1 or abs(n * h - s_max) > 1e-9 * max(1.0, s_max):
        raise ValueError("quadrature_mesh must divide the largest s")
    evaluate, t0, t1 = _as_evaluator(source, functional, config)
    if t0 > 1e-12 or s_max > t1 + 1e-9:
        raise ValueError(f"s_grid exceeds the curve range [{t0}, {t1}]")
    node_t = h * np.arange(n + 1)
    node_t[-1] = s_max
    nodes = [evaluate(t) for t in node_t]
    mids = [evaluate(t) for t in node_t[:-1] + h / 2]
    sx, sy = functional.space_x, functional.space_y

    cells = np.zeros((n, 5))
    failed = False
    for j in range(n):
        (xa, ya), (xb, yb), (xm, ym) = nodes[j], nodes[j + 1], mids[j]
        dt = node_t[j + 1] - node_t[j]
        cells[j, 0] = (functional.eval_x(xb, ya) - functional.eval_x(xa, ya)
                       + functional.eval_y(xa, yb) - functional.eval_y(xa, ya))
        cells[j, 1] = 0.5 * sx.distance(xb, xa) ** 2 / dt
        cells[j, 2] = 0.5 * sy.distance(yb, ya) ** 2 / dt
        gx, fx = _slope(functional.slope_x, slope_estimate_x, functional, xm, ym, rng)
        gy, fy = _slope(functional.slope_y, slope_estimate_y, functional, xm, ym, rng)
        failed = failed or fx or fy
        cells[j, 3] = 0.5 * gx ** 2 * dt
        cells[j, 4] = 0.5 * gy ** 2 * dt
    cum = np.vstack([np.zeros(5), np.cumsum(cells, axis=0)])

    def index_of(t):
        i = int(round(t / h))
        if abs(node_t[min(i, n)] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a quadrature node")
        return i

    s_idx = [index_of(s) for s in s_grid]
    comps = tuple(tuple(float(v) for v in cum[i]) for i in s_idx)
    residuals = tuple(float(np.sum(cum[i])) for i in s_idx)

    if t_grid is None:
        t_grid = [s_max * (i + 1) / 9 for i in range(8)]
        t_grid = [node_t[int(round(t / h))] for t in t_grid]
    tails = []
    for t in t_grid:
        it = index_of(t)
        later = [float(np.sum(cum[i] - cum[it])) for i in s_idx if i > it]
        if later:
            tails.append((float(t), max(later)))

    refinement = {}
    if refine_upsilon:
        curves = CurvePair.from_function(evaluate, node_t, sx, sy)
        res = upsilon_refined(curves, functional, 0.0, s_max,
                              mesh_schedule=(4 * h, 2 * h, h))
        refinement = {"meshes": list(res.meshes), "values": list(res.values),
                      "converged": res.converged}
    return EDIReport(s_grid, residuals, comps, tuple(tails), float(edi_tol), h, failed,
                     refinement)


@dataclass(frozen=True)
class EDICertificate:
    taus: tuple
    residuals: tuple
    order: float
    extrapolated: float
    edi_tol: float
    reports: tuple = field(default=(), compare=False, repr=False)

    @property
    def consistent(self) -> bool:
        return math.isfinite(self.extrapolated) and self.extrapolated <= self.edi_tol

    def to_dict(self) -> dict:
        return {"taus": list(self.taus), "residuals": list(self.residuals),
                "order": self.order, "extrapolated": self.extrapolated,
                "edi_tol": self.edi_tol, "consistent": self.consistent}


def extrapolate_to_zero(taus: Sequence[float], values: Sequence[float]) -> tuple[float, float]:
    """Fit ``v(tau) = v0 + a tau^p`` through the three finest levels.

    The levels must shrink by a common ratio.  Returns ``(v0, p)``; when
    the differences do not shrink geometrically ``p`` falls back to 1.
    """
    if len(taus) < 3:
        raise ValueError("need at least three levels")
    t1, t2, t3 = taus[-3:]
    r1, r2, r3 = values[-3:]
    q = t1 / t2
    if abs(q - t2 / t3) > 1e-6 * q:
        raise ValueError("levels must shrink by a common ratio")
    d1, d2 = r1 - r2, r2 - r3
    p = 1.0
    if d1 != 0 and d2 != 0 and d1 / d2 > 1:
        p = math.log(d1 / d2) / math.log(q)
    return r3 - d2 / (q ** p - 1), p


def edi_certify_limit(sweep, functional, edi_tol: float = 1e-3, s: float | None = None,
                      per_step: int = 8, config: ProxConfig | None = None) -> EDICertificate:
    """Residual at ``s`` (default: the common horizon) for each trajectory of
    a tau sweep, extrapolated to ``tau = 0``.

    ``sweep`` is a :class:`ConvergenceReport` with trajectories or a plain
    sequence of trajectories, coarsest first.
    """
    trajs = tuple(getattr(sweep, "trajectories", sweep))
    if len(trajs) < 3:
        raise ValueError("need at least three tau levels")
    s = min(t.T for t in trajs) if s is None else s
    reports, residuals = [], []
    for traj in trajs:
        rep = edi_residual(traj, functional, [s], traj.tau / per_step, edi_tol=edi_tol,
                           config=config)
        reports.append(rep)
        residuals.append(rep.residuals[0])
    taus = tuple(t.tau for t in trajs)
    try:
        value, p = extrapolate_to_zero(taus, residuals)
    except ValueError:
        value, p = float("nan"), float("nan")
    return EDICertificate(taus, tuple(residuals), p, value, edi_tol, tuple(reports))


def curve_from_function(fn: Callable[[float], tuple], T: float, n: int, space_x, space_y) -> CurvePair:
    """Convenience wrapper: an exact curve on ``[0, T]`` with ``n`` cells."""
    return CurvePair.from_function(fn, np.linspace(0.0, T, n + 1), space_x, space_y)
