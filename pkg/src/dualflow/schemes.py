"""Discrete dual flows: proximal (minimizing-movement) steps for each player,
the alternating recurrence, de Giorgi interpolation, the explicit scheme and
the tools that compare schemes and step sizes."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .errors import (OutOfDomainError, ParticleEscapeError, StepFailure,
                     UnsupportedConfigurationError)
from .metric import Curve, CurvePair, write_curves_csv
from .spaces import (EmpiricalMeasure, EuclideanSpace, GridFunctionSpace,
                     GridLipschitzFunction, MeasureSpace)

SOLVERS = ("auto", "picard", "gradient-armijo", "per-particle-scalar",
           "coordinate-descent", "active-set")


@dataclass(frozen=True)
class ProxConfig:
    """Inner-solver settings for proximal steps.

    ``inner_solver="auto"`` picks Picard iteration on Euclidean spaces when
    ``tau * L < 0.5`` (gradient descent with Armijo backtracking otherwise),
    exact per-particle proxes on measure spaces and an active-set bounded
    least-squares solve on grid-function spaces.
    """

    tau: float | None = None
    inner_solver: str = "auto"
    inner_tol: float = 1e-10
    inner_max_iter: int = 10_000
    check_monotone: bool = True

    def __post_init__(self):
        if self.inner_solver not in SOLVERS:
            raise ValueError(f"unknown inner solver {self.inner_solver!r}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class Certificate:
    solver: str
    iterations: int
    residual: float

    def to_dict(self):
        return {"solver": self.solver, "iterations": self.iterations, "residual": self.residual}


def steps_for(T: float, tau: float) -> int:
    """Number of steps ``N`` with ``N * tau == T``; refuses partial steps."""
    if not (tau > 0 and T >= 0):
        raise ValueError("need tau > 0 and T >= 0")
    n = round(T / tau)
    if abs(n * tau - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of tau={tau}")
    return int(n)


# --------------------------------------------------------------------------
# inner solvers


def _prox_euclidean(x, partial, tau, config):
    if partial.grad is None:
        raise UnsupportedConfigurationError("Euclidean proximal steps need an analytic gradient")
    x = np.asarray(x, dtype=float)
    L = partial.grad_lipschitz
    solver = config.inner_solver
    if solver == "picard" and L is not None and tau * L >= 1.0:
        raise ValueError(f"Picard iteration needs tau*L < 1 (tau*L = {tau * L})")
    if solver in ("auto", "picard") and (L is None or tau * L < 0.5 or solver == "picard"):
        out = _picard(x, partial, tau, config)
        if out is not None or solver == "picard":
            if out is None:
                raise StepFailure("Picard iteration did not converge")
            return out
    return _armijo(x, partial, tau, config)


def _fixed_point_residual(u, x, partial, tau):
    return float(np.linalg.norm(u - (x - tau * partial.grad(u))))


def _picard(x, partial, tau, config):
    u = x.copy()
    prev = math.inf
    growth = 0
    for it in range(1, config.inner_max_iter + 1):
        nxt = x - tau * partial.grad(u)
        step = float(np.linalg.norm(nxt - u))
        u = nxt
        if step <= config.inner_tol:
            res = _fixed_point_residual(u, x, partial, tau)
            if res <= config.inner_tol:
                return u, Certificate("picard", it, res)
        growth = growth + 1 if step > prev else 0
        if growth >= 5 or not np.all(np.isfinite(u)):
            return None
        prev = step
    return None


def _armijo(x, partial, tau, config):
    def phi(u):
        return float(np.dot(u - x, u - x)) / (2 * tau) + partial.value(u)

    def dphi(u):
        return (u - x) / tau + partial.grad(u)

    u = x.copy()
    g = dphi(u)
    alpha = tau
    for it in range(1, config.inner_max_iter + 1):
        res = tau * float(np.linalg.norm(g))
        if res <= config.inner_tol:
            return u, Certificate("gradient-armijo", it, _fixed_point_residual(u, x, partial, tau))
        f0 = phi(u)
        gg = float(np.dot(g, g))
        while True:
            cand = u - alpha * g
            if phi(cand) <= f0 - 1e-4 * alpha * gg or alpha < 1e-300:
                break
            alpha *= 0.5
        g_new = dphi(cand)
        s, dy = cand - u, g_new - g
        u, g = cand, g_new
        sy = float(np.dot(s, dy))
        # Barzilai-Borwein trial step for the next backtracking search
        alpha = float(np.dot(s, s)) / sy if sy > 0 else 2 * alpha
    raise StepFailure("gradient-armijo inner solver did not converge",
                      residual=tau * float(np.linalg.norm(g)))


def _scalar_prox_pl(q, tau, ell: GridLipschitzFunction):
    """Exact minimizers of ``(p - q)^2 / (2 tau) + ell(p)`` over the grid
    interval, one per entry of ``q``."""
    knots = ell.grid.knots
    slopes = ell.slopes
    lo, hi = knots[:-1][None, :], knots[1:][None, :]
    free = q[:, None] - tau * slopes[None, :]
    cand = np.clip(free, lo, hi)
    vals = ell.values[:-1][None, :] + slopes[None, :] * (cand - lo)
    obj = (cand - q[:, None]) ** 2 / (2 * tau) + vals
    best = obj.min(axis=1, keepdims=True)
    scale = 1e-14 * (1.0 + np.abs(best))
    # ties: closest candidate to the starting particle
    dist = np.where(obj <= best + scale, np.abs(cand - q[:, None]), np.inf)
    j = np.argmin(dist, axis=1)
    rows = np.arange(q.size)
    p = cand[rows, j]
    escaped = ((p <= knots[0]) & (free[rows, j] < knots[0])) | \
              ((p >= knots[-1]) & (free[rows, j] > knots[-1]))
    if np.any(escaped):
        raise ParticleEscapeError(f"particles left the grid [{knots[0]}, {knots[-1]}]")
    return p


def _prox_measure_w2(mu, partial, tau):
    # sorted order is preserved: the 1D prox map is nondecreasing
    q = mu.sorted()
    p = _scalar_prox_pl(q, tau, partial.potential)
    return EmpiricalMeasure(p), Certificate("per-particle-scalar", 1, 0.0)


def _prox_measure_w1(mu, partial, tau, config):
    ell = partial.potential
    knots, slopes = ell.grid.knots, ell.slopes
    q = mu.sorted()
    M = q.size
    p = q.copy()

    def total(pp):
        return (np.mean(np.abs(pp - q))) ** 2 / (2 * tau) + float(np.mean(ell(pp)))

    current = total(p)
    for sweep in range(1, config.inner_max_iter + 1):
        for i in range(M):
            a = (np.sum(np.abs(p - q)) - abs(p[i] - q[i])) / M
            cands = [q[i]]
            for side in (1.0, -1.0):
                free = q[i] - M * slopes * tau - side * M * a
                lo = np.maximum(knots[:-1], q[i]) if side > 0 else knots[:-1]
                hi = knots[1:] if side > 0 else np.minimum(knots[1:], q[i])
                ok = lo <= hi
                cands.extend(np.clip(free[ok], lo[ok], hi[ok]))
            cands = np.asarray(cands)
            obj = (a + np.abs(cands - q[i]) / M) ** 2 / (2 * tau) + ell(cands) / M
            p[i] = cands[int(np.argmin(obj))]
        # monotone matching is optimal in 1D, so re-sorting never raises the cost
        p = np.sort(p)
        new = total(p)
        improvement = current - new
        current = new
        if improvement < config.inner_tol:
            return EmpiricalMeasure(np.sort(p)), Certificate("coordinate-descent", sweep, max(improvement, 0.0))
    raise StepFailure("W1 coordinate descent did not settle", residual=improvement)


def _prox_grid(ell, partial, tau, space: GridFunctionSpace, config):
    if partial.weights is None:
        raise UnsupportedConfigurationError(
            "grid-function proximal steps need a loss that is linear in the knot values")
    A = space.prox_matrix
    B, R, RB, hmax = space.prox_factor
    target = ell.values - tau * np.linalg.solve(A, partial.weights)
    c = space.lip_bound * space.grid.spacing
    K = space.grid.K
    lb = np.concatenate([[-np.inf], np.full(K - 1, -c)])
    ub = -lb
    sol = lsq_linear(RB, R @ target, bounds=(lb, ub), method="bvls", tol=1e-14,
                     max_iter=config.inner_max_iter)
    z = np.clip(sol.x, lb, ub)
    grad = B.T @ (A @ (B @ z - target))
    residual = float(np.max(np.abs(z - np.clip(z - grad / hmax, lb, ub))))
    if residual > config.inner_tol * max(1.0, float(np.max(np.abs(z)))):
        raise StepFailure("active-set solve of the discriminator step failed", residual=residual)
    values = B @ z
    # increments sit in the box up to rounding of the cumulative sum
    out = GridLipschitzFunction(space.grid, values, max(space.lip_bound, ell.lip_bound))
    return out, Certificate("active-set", int(sol.nit), residual)


def prox(space, point, partial, tau: float, config: ProxConfig | None = None):
    """Minimize ``d(u, point)^2 / (2 tau) + loss(u)`` over the space.

    Returns the minimizer and a :class:`Certificate`.  Raises
    :class:`StepFailure` when no certificate can be produced.
    """
    config = config or ProxConfig()
    if tau == 0:
        return point, Certificate("identity", 0, 0.0)
    if isinstance(space, EuclideanSpace):
        u, cert = _prox_euclidean(point, partial, tau, config)
    elif isinstance(space, MeasureSpace):
        if partial.potential is None:
            raise UnsupportedConfigurationError(
                "measure proximal steps need a loss of the form E_mu(potential)")
        if space.prox_order == 2:
            u, cert = _prox_measure_w2(point, partial, tau)
        else:
            u, cert = _prox_measure_w1(point, partial, tau, config)
    elif isinstance(space, GridFunctionSpace):
        u, cert = _prox_grid(point, partial, tau, space, config)
    else:
        raise UnsupportedConfigurationError(f"no proximal solver for {space!r}")
    if config.check_monotone:
        before = partial.value(point)
        after = space.prox_distance(u, point) ** 2 / (2 * tau) + partial.value(u)
        if after > before + 1e-9 * (1.0 + abs(before)):
            raise StepFailure(f"proximal step increased the objective ({after} > {before})",
                              residual=after - before)
    return u, cert


def prox_step_x(x_k, y_k, tau, functional, config: ProxConfig | None = None):
    """``x_{k+1}`` in the minimizer map of ``C^x(., y_k)`` from ``x_k``."""
    return prox(functional.space_x, x_k, functional.partial_x(y_k), tau, config)


def prox_step_y(x_next, y_k, tau, functional, config: ProxConfig | None = None):
    """``y_{k+1}`` from ``y_k`` against the already updated ``x_{k+1}``."""
    return prox(functional.space_y, y_k, functional.partial_y(x_next), tau, config)


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    tau: float
    xs: tuple
    ys: tuple
    space_x: object
    space_y: object
    certificates: tuple = ()
    inner_solver: str = "auto"
    swap_order: bool = False
    interpolated: CurvePair | None = field(default=None, compare=False)

    @property
    def n_steps(self) -> int:
        return len(self.xs) - 1

    @property
    def T(self) -> float:
        return self.n_steps * self.tau

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(len(self.xs))

    @property
    def steps(self):
        return list(zip(self.xs, self.ys))

    def curves(self) -> CurvePair:
        t = self.times
        return CurvePair(Curve(t, self.xs, self.space_x), Curve(t, self.ys, self.space_y))

    def max_residual(self) -> float:
        res = [c.residual for pair in self.certificates for c in pair]
        return max(res) if res else 0.0

    def sidecar(self) -> dict:
        its = [c.iterations for pair in self.certificates for c in pair]
        return {
            "tau": self.tau,
            "T": self.T,
            "steps": self.n_steps,
            "inner_solver": self.inner_solver,
            "certificates_summary": {
                "count": len(its),
                "max_iterations": max(its) if its else 0,
                "max_residual": self.max_residual(),
            },
        }

    def write(self, csv_path, json_path=None) -> None:
        c = self.curves()
        write_curves_csv(csv_path, [c.x, c.y], prefixes=["x_", "y_"])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
                fh.write("\n")


def run_dual_flow(x0, y0, tau: float, T: float, functional, config: ProxConfig | None = None,
                  swap_order: bool = False, x_substeps: int = 1) -> Trajectory:
    """Iterate the alternating proximal recurrence for ``T / tau`` steps.

    The first player moves first against the old second player; the second
    then moves against the updated first player.  ``swap_order`` reverses
    the roles; ``x_substeps`` repeats the first player's step (each of size
    ``tau``) before every step of the second player.
    """
    config = config or ProxConfig()
    n = steps_for(T, tau)
    if x_substeps < 1:
        raise ValueError("x_substeps must be >= 1")
    xs, ys, certs = [x0], [y0], []
    x, y = x0, y0
    for k in range(n):
        try:
            if not swap_order:
                for _ in range(x_substeps):
                    x, cx = prox_step_x(x, y, tau, functional, config)
                y, cy = prox_step_y(x, y, tau, functional, config)
            else:
                y, cy = prox(functional.space_y, y, functional.partial_y(x), tau, config)
                for _ in range(x_substeps):
                    x, cx = prox(functional.space_x, x, functional.partial_x(y), tau, config)
        except StepFailure as exc:
            exc.step_index = k
            raise
        xs.append(x)
        ys.append(y)
        certs.append((cx, cy))
    return Trajectory(tau, tuple(xs), tuple(ys), functional.space_x, functional.space_y,
                      tuple(certs), config.inner_solver, swap_order)


def de_giorgi_interpolate(trajectory: Trajectory, t: float, functional,
                          config: ProxConfig | None = None):
    """Variational interpolant at time ``t``.

    For ``t`` in ``(k tau, (k+1) tau]`` and offset ``s = t - k tau`` this
    solves the two proximal problems with step ``s``, the second one against
    the stored ``x_{k+1}``.  At ``s = tau`` the result must coincide with the
    stored step; a mismatch raises :class:`StepFailure`.
    """
    config = config or ProxConfig()
    tau = trajectory.tau
    if not (-1e-12 <= t <= trajectory.T * (1 + 1e-12) + 1e-12):
        raise OutOfDomainError(f"t={t} outside [0, {trajectory.T}]")
    if t <= 0:
        return trajectory.xs[0], trajectory.ys[0]
    k = min(max(math.ceil(t / tau - 1e-9) - 1, 0), trajectory.n_steps - 1)
    s = min(t - k * tau, tau)
    if abs(s - tau) <= 1e-12 * tau:
        s = tau
    x_k, y_k = trajectory.xs[k], trajectory.ys[k]
    x_next = trajectory.xs[k + 1]
    x_t, _ = prox(functional.space_x, x_k, functional.partial_x(y_k), s, config)
    y_t, _ = prox(functional.space_y, y_k, functional.partial_y(x_next), s, config)
    if s == tau:
        tol = max(1e-9, 100 * config.inner_tol)
        gap = (functional.space_x.distance(x_t, x_next)
               + functional.space_y.distance(y_t, trajectory.ys[k + 1]))
        if gap > tol:
            raise StepFailure(f"de Giorgi endpoint mismatch at step {k + 1}: {gap}", residual=gap)
        return x_next, trajectory.ys[k + 1]
    return x_t, y_t


def de_giorgi_curve(trajectory: Trajectory, functional, config: ProxConfig | None = None,
                    per_step: int = 8) -> CurvePair:
    """Dense samples of the de Giorgi interpolant (``per_step`` per step), with
    an exact evaluator attached."""
    config = config or ProxConfig()
    times = np.linspace(0.0, trajectory.T, trajectory.n_steps * per_step + 1)

    def fn(t):
        return de_giorgi_interpolate(trajectory, t, functional, config)

    return CurvePair.from_function(fn, times, functional.space_x, functional.space_y)


# --------------------------------------------------------------------------
# explicit scheme and comparisons


def explicit_step(x_k, y_k, tau, functional):
    """One explicit gradient step per player, alternation preserved."""
    if functional.grad_x is None or functional.grad_y is None:
        raise UnsupportedConfigurationError("explicit steps need analytic gradients")
    x_next = np.asarray(x_k, dtype=float) - tau * functional.grad_x(x_k, y_k)
    y_next = np.asarray(y_k, dtype=float) - tau * functional.grad_y(x_next, y_k)
    return x_next, y_next


def run_explicit(x0, y0, tau, T, functional) -> Trajectory:
    n = steps_for(T, tau)
    xs, ys = [np.asarray(x0, dtype=float)], [np.asarray(y0, dtype=float)]
    for _ in range(n):
        x, y = explicit_step(xs[-1], ys[-1], tau, functional)
        xs.append(x)
        ys.append(y)
    return Trajectory(tau, tuple(xs), tuple(ys), functional.space_x, functional.space_y,
                      (), "explicit")


@dataclass(frozen=True)
class SchemeComparison:
    tau: float
    T: float
    steps: int
    explicit: np.ndarray
    implicit: np.ndarray
    gap: float
    budget: float
    L: float
    C_f: float

    @property
    def passed(self) -> bool:
        return self.gap <= self.budget

    def to_dict(self):
        return {"tau": self.tau, "T": self.T, "steps": self.steps, "gap": self.gap,
                "budget": self.budget, "L": self.L, "C_f": self.C_f, "passed": self.passed}


def _estimate_field_constants(f, x0, T, rng, samples=2000):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = np.atleast_1d(np.asarray(f(x0), dtype=float))
    radius = 1.0 + 2 * T * (1.0 + float(np.linalg.norm(f0)))
    pts = x0 + rng.uniform(-radius, radius, (samples, x0.size))
    vals = np.array([np.atleast_1d(f(p)) for p in pts])
    C_f = float(np.max(np.linalg.norm(vals, axis=1)))
    other = pts + rng.normal(scale=1e-3, size=pts.shape)
    dv = np.array([np.atleast_1d(f(p)) for p in other]) - vals
    L = float(np.max(np.linalg.norm(dv, axis=1) / np.linalg.norm(other - pts, axis=1)))
    return L, C_f


def _implicit_field_step(x, tau, f, tol=1e-15, max_iter=10_000):
    u = x.copy()
    for _ in range(max_iter):
        nxt = x + tau * np.asarray(f(u), dtype=float)
        if np.linalg.norm(nxt - u) <= tol * (1.0 + np.linalg.norm(x)):
            return nxt
        u = nxt
    raise StepFailure("Picard iteration for the implicit scheme did not converge")


def compare_schemes(x0, tau: float, T: float, f: Callable, L: float | None = None,
                    C_f: float | None = None, rng=None) -> SchemeComparison:
    """Run ``x+ = x + tau f(x)`` and ``x+ = x + tau f(x+)`` side by side and
    test the final gap against ``tau e^{tau L} T L C_f``.  Missing constants
    are estimated by sampling around ``x0``."""
    n = steps_for(T, tau)
    if L is None or C_f is None:
        L_est, C_est = _estimate_field_constants(f, x0, T, rng or np.random.default_rng(0))
        L = L_est if L is None else L
        C_f = C_est if C_f is None else C_f
    if tau * L >= 1:
        raise ValueError(f"need tau*L < 1 for a unique implicit step (tau*L = {tau * L})")
    xe = [np.atleast_1d(np.asarray(x0, dtype=float))]
    xi = [xe[0].copy()]
    for _ in range(n):
        xe.append(xe[-1] + tau * np.atleast_1d(np.asarray(f(xe[-1]), dtype=float)))
        xi.append(_implicit_field_step(xi[-1], tau, f))
    gap = float(np.linalg.norm(xi[-1] - xe[-1]))
    budget = tau * math.exp(tau * L) * T * L * C_f
    return SchemeComparison(tau, T, n, np.array(xe), np.array(xi), gap, budget, float(L), float(C_f))


@dataclass(frozen=True)
class ConvergenceReport:
    taus: tuple
    gaps: tuple
    trajectories: tuple = field(default=(), compare=False, repr=False)

    @property
    def ratios(self) -> tuple:
        return tuple(b / a if a > 0 else 0.0 for a, b in zip(self.gaps[:-1], self.gaps[1:]))

    @property
    def orders(self) -> tuple:
        out = []
        for (t0, t1), (g0, g1) in zip(zip(self.taus[:-1], self.taus[1:]),
                                      zip(self.gaps[:-1], self.gaps[1:])):
            out.append(math.log(g0 / g1) / math.log(t0 / t1) if g0 > 0 and g1 > 0 else float("nan"))
        return tuple(out)

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.gaps[:-1], self.gaps[1:]))

    @property
    def order(self) -> float:
        finite = [o for o in self.orders if math.isfinite(o)]
        return float(np.mean(finite)) if finite else float("nan")

    def to_dict(self):
        return {"taus": list(self.taus), "gaps": list(self.gaps), "ratios": list(self.ratios),
                "orders": list(self.orders), "monotone": self.monotone}


def sup_gap(coarse: Trajectory, fine: Trajectory) -> float:
    """Sup over the coarse time grid of the product distance to the fine
    trajectory, aligned left-constantly in time."""
    worst = 0.0
    for k, t in enumerate(coarse.times):
        j = min(int(math.floor(t / fine.tau + 1e-9)), fine.n_steps)
        dx = coarse.space_x.distance(coarse.xs[k], fine.xs[j])
        dy = coarse.space_y.distance(coarse.ys[k], fine.ys[j])
        worst = max(worst, math.hypot(dx, dy))
    return worst


def tau_sweep(x0, y0, T: float, functional, taus: Sequence[float],
              config: ProxConfig | None = None, parallel: int = 1) -> ConvergenceReport:
    """Run the dual flow for each step size (descending) and report the
    sup-in-time gaps between consecutive levels."""
    taus = tuple(float(t) for t in taus)
    if any(b >= a for a, b in zip(taus[:-1], taus[1:])):
        raise ValueError("taus must be strictly descending")
    for tau in taus:
        steps_for(T, tau)

    def one(tau):
        return run_dual_flow(x0, y0, tau, T, functional, config)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            trajs = tuple(pool.map(one, taus))
    else:
        trajs = tuple(one(t) for t in taus)
    gaps = tuple(sup_gap(a, b) for a, b in zip(trajs[:-1], trajs[1:]))
    return ConvergenceReport(taus, gaps, trajs)
