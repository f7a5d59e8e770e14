"""Ready-made experiments: the bilinear oscillation toy, a particle WGAN with
Dirac targets, and the mode-collapse diagnostic.

Throughout, the first player ``x`` is the discriminator and the second
player ``y`` the generator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .functionals import BilinearToyFunctional, WganFunctional, slope_estimate_x
from .metric import _fmt
from .schemes import ProxConfig, Trajectory, prox_step_x, run_dual_flow
from .spaces import (EmpiricalMeasure, Grid, GridFunctionSpace, GridLipschitzFunction,
                     MeasureSpace, w1_distance)


def write_series(path, times, values, header=("t", "value")) -> None:
    """Two-column CSV ``t, value`` for plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, v in zip(times, values):
            w.writerow([_fmt(t), _fmt(v)])


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sign_changes(values, dead_band: float = 1e-6) -> int:
    """Sign changes of the first differences, ignoring increments inside
    the dead band."""
    d = np.diff(np.asarray(values, dtype=float))
    d = d[np.abs(d) > dead_band]
    return int(np.sum(np.sign(d[1:]) != np.sign(d[:-1])))


def aligned_step(T: float, tau: float) -> tuple[int, float]:
    """Number of steps ``round(T / tau)`` and the step that fits ``T`` exactly."""
    n = max(int(round(T / tau)), 1)
    return n, T / n


# --------------------------------------------------------------------------
# bilinear toy


@dataclass(frozen=True)
class BilinearToyInstance:
    """Two-parameter toy around the Dirac target ``x_r``.

    ``generator0`` and ``discriminator0`` are the initial generator point and
    discriminator vector; the flow rotates ``(g - x_r, d)`` around zero.
    """

    x_r: tuple = (0.0, 0.0)
    generator0: tuple = (1.0, 0.0)
    discriminator0: tuple = (0.0, 0.0)
    box: float = 10.0

    def __post_init__(self):
        for name in ("x_r", "generator0", "discriminator0"):
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} must have two entries")

    @property
    def functional(self) -> BilinearToyFunctional:
        return BilinearToyFunctional(np.asarray(self.x_r, dtype=float), self.box)

    @property
    def initial(self):
        return np.asarray(self.discriminator0, dtype=float), np.asarray(self.generator0, dtype=float)

    def radius(self, d, g) -> float:
        return float(np.hypot(np.linalg.norm(np.asarray(g) - np.asarray(self.x_r)),
                              np.linalg.norm(d)))


@dataclass(frozen=True)
class OrbitReport:
    tau: float
    T: float
    r0: float
    radius_drift: float
    return_distance: float
    min_radius: float
    min_generator_distance: float
    radii: tuple = field(default=(), repr=False)
    generator_distances: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "T": self.T, "r0": self.r0, "radius_drift": self.radius_drift,
                "return_distance": self.return_distance, "min_radius": self.min_radius,
                "min_generator_distance": self.min_generator_distance}


def run_bilinear_toy(instance: BilinearToyInstance, tau: float, T: float = 2 * math.pi,
                     config: ProxConfig | None = None, align: bool = True):
    """Alternating proximal steps for the toy; returns ``(trajectory, report)``.

    With ``align`` the step is adjusted to ``T / round(T / tau)`` so that
    horizons such as ``2 pi`` are hit exactly.
    """
    f = instance.functional
    if align:
        _, tau = aligned_step(T, tau)
        T = tau * round(T / tau)
    d0, g0 = instance.initial
    traj = run_dual_flow(d0, g0, tau, T, f, config)
    radii = np.array([instance.radius(d, g) for d, g in traj.steps])
    gen = np.array([float(np.linalg.norm(g - f.x_r)) for g in traj.ys])
    r0 = radii[0]
    ret = float(np.hypot(np.linalg.norm(traj.xs[-1] - d0), np.linalg.norm(traj.ys[-1] - g0)))
    report = OrbitReport(tau, traj.T, float(r0), float(np.max(np.abs(radii - r0))), ret,
                         float(radii.min()), float(gen.min()), tuple(radii), tuple(gen))
    return traj, report


# --------------------------------------------------------------------------
# particle WGAN


def _wgan_spaces(grid, M, lip_bound, prox_metric, measure_prox):
    order = {"W1": 1, "W2": 2}[measure_prox]
    X = GridFunctionSpace(grid, lip_bound, prox_metric)
    Y = MeasureSpace(M, order=1, prox_order=order, lo=grid.lo, hi=grid.hi)
    return X, Y


@dataclass(frozen=True)
class DiracFitWganInstance:
    """Particle generator against an empirical target with a grid-Lipschitz
    discriminator.  Without an explicit ``grid`` one with ``K`` knots is laid
    around the target and initial particles."""

    target: EmpiricalMeasure
    generator0: EmpiricalMeasure
    grid: Grid | None = None
    K: int = 101
    lip_bound: float = 1.0
    prox_metric: str = "h1"
    measure_prox: str = "W2"
    discriminator0: GridLipschitzFunction | None = None

    def __post_init__(self):
        if self.grid is None:
            pts = np.concatenate([self.target.particles, self.generator0.particles])
            object.__setattr__(self, "grid", Grid.around(pts, self.K))
        g = self.grid
        pts = np.concatenate([self.target.particles, self.generator0.particles])
        if np.any(pts <= g.lo) or np.any(pts >= g.hi):
            raise ValueError("particles must lie in the grid interior")
        if self.measure_prox not in ("W1", "W2"):
            raise ValueError("measure_prox must be 'W1' or 'W2'")

    @property
    def functional(self) -> WganFunctional:
        X, Y = _wgan_spaces(self.grid, self.generator0.size, self.lip_bound,
                            self.prox_metric, self.measure_prox)
        return WganFunctional(self.target, X, Y)

    @property
    def initial(self):
        ell = self.discriminator0
        if ell is None:
            ell = GridLipschitzFunction(self.grid, np.zeros(self.grid.K), self.lip_bound)
        return ell, self.generator0


@dataclass(frozen=True)
class FitReport:
    times: tuple
    w1: tuple
    payoff: tuple
    sign_changes: int
    last_quarter_mean_w1: float
    last_quarter_amplitude: float
    max_antisymmetry_error: float
    substeps: int

    def to_dict(self) -> dict:
        return {"sign_changes": self.sign_changes,
                "last_quarter_mean_w1": self.last_quarter_mean_w1,
                "last_quarter_amplitude": self.last_quarter_amplitude,
                "max_antisymmetry_error": self.max_antisymmetry_error,
                "initial_w1": self.w1[0], "final_w1": self.w1[-1],
                "final_payoff": self.payoff[-1], "substeps": self.substeps}


def run_dirac_fit(instance: DiracFitWganInstance, tau: float, T: float,
                  discriminator_substeps: int = 1, config: ProxConfig | None = None):
    """Dual flow with ``discriminator_substeps`` discriminator steps per
    generator step; returns ``(trajectory, report)``."""
    if discriminator_substeps < 1:
        raise ValueError("discriminator_substeps must be >= 1")
    f = instance.functional
    ell0, mu0 = instance.initial
    traj = run_dual_flow(ell0, mu0, tau, T, f, config, x_substeps=discriminator_substeps)
    w1 = np.array([w1_distance(mu, instance.target) for mu in traj.ys])
    payoff = np.array([f.payoff(ell, mu) for ell, mu in traj.steps])
    anti = max(abs(f.eval_x(ell, mu) + f.eval_y(ell, mu)) for ell, mu in traj.steps)
    tail = w1[3 * len(w1) // 4:]
    report = FitReport(tuple(traj.times), tuple(w1), tuple(payoff), sign_changes(w1),
                       float(tail.mean()), float(tail.max() - tail.min()), float(anti),
                       discriminator_substeps)
    return traj, report


# --------------------------------------------------------------------------
# mode collapse


@dataclass(frozen=True)
class ModeCollapseScenario:
    """Generator stuck on a strict subset of the target's atoms.

    Both measures are equal-weight empirical measures with the same particle
    count, so ``target=[0.2, 0.8]`` with ``collapsed=[0.2, 0.2]`` puts both
    generator particles on one of the two target atoms.
    """

    target: EmpiricalMeasure
    collapsed: EmpiricalMeasure
    perturbation_scale: float = 0.01
    grid: Grid = Grid(0.0, 1.0, 101)
    lip_bound: float = 1.0
    prox_metric: str = "h1"
    measure_prox: str = "W2"
    allow_off_support: bool = False

    def __post_init__(self):
        if self.target.size != self.collapsed.size:
            raise ValueError("target and collapsed measures need the same particle count")
        atoms_r = np.unique(self.target.particles)
        atoms = np.unique(self.collapsed.particles)
        if not self.allow_off_support and not np.all(np.isin(atoms, atoms_r)):
            raise ValueError("collapsed atoms must lie on the target support")

    @property
    def measures_equal(self) -> bool:
        return bool(np.array_equal(self.target.sorted(), self.collapsed.sorted()))

    @property
    def functional(self) -> WganFunctional:
        X, Y = _wgan_spaces(self.grid, self.target.size, self.lip_bound, self.prox_metric,
                            self.measure_prox)
        return WganFunctional(self.target, X, Y)

    def perturbed(self) -> EmpiricalMeasure:
        """Particles sharing an atom are spread evenly over
        ``[atom - scale, atom + scale]``."""
        p = self.collapsed.sorted().copy()
        for atom in np.unique(p):
            idx = np.flatnonzero(p == atom)
            if idx.size > 1:
                p[idx] = atom + self.perturbation_scale * np.linspace(-1.0, 1.0, idx.size)
            else:
                p[idx] = atom + self.perturbation_scale
        return EmpiricalMeasure(p)


@dataclass(frozen=True)
class Diagnosis:
    collapsed_w1: float
    discriminator_payoff: float
    discriminator_steps: int
    discriminator_slope_lower_bound: float
    escaped_after_perturbation: bool
    steps_to_escape: int | None
    min_w1: float
    final_w1: float
    message: str = ""
    times: tuple = field(default=(), repr=False)
    w1: tuple = field(default=(), repr=False)
    trajectory: Trajectory | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"collapsed_w1": self.collapsed_w1,
                "discriminator_payoff": self.discriminator_payoff,
                "discriminator_steps": self.discriminator_steps,
                "discriminator_slope_lower_bound": self.discriminator_slope_lower_bound,
                "escaped_after_perturbation": self.escaped_after_perturbation,
                "steps_to_escape": self.steps_to_escape, "min_w1": self.min_w1,
                "final_w1": self.final_w1, "message": self.message}


def train_discriminator(f: WganFunctional, ell, mu, tau: float, target_payoff: float,
                        tol: float = 1e-6, max_steps: int = 2000, config=None):
    """Discriminator proximal steps against a frozen generator until the
    payoff is within ``tol`` of ``target_payoff`` or stops moving."""
    payoff = f.payoff(ell, mu)
    steps = 0
    while steps < max_steps and payoff < target_payoff - tol:
        nxt, _ = prox_step_x(ell, mu, tau, f, config)
        steps += 1
        new = f.payoff(nxt, mu)
        ell = nxt
        if abs(new - payoff) <= 1e-14:
            payoff = new
            break
        payoff = new
    return ell, payoff, steps


def mode_collapse_diagnostic(scenario: ModeCollapseScenario, tau: float = 0.005,
                             T: float = 10.0, discriminator_tau: float = 0.05,
                             max_discriminator_steps: int = 2000, rng=None,
                             config: ProxConfig | None = None) -> Diagnosis:
    """Test the two checkable claims about a collapsed generator.

    (i) After training the discriminator against the collapsed measure, the
    slope of its loss is bounded away from zero, so the state is not
    stationary.  (ii) After perturbing the generator particles the dual flow
    brings ``W1`` below its collapsed value at some time in ``[0, T]``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    f = scenario.functional
    w_c = w1_distance(scenario.collapsed, scenario.target)
    if scenario.measures_equal:
        return Diagnosis(0.0, 0.0, 0, 0.0, False, None, 0.0, 0.0,
                         "no collapse: measures equal")
    ell0 = GridLipschitzFunction(scenario.grid, np.zeros(scenario.grid.K), scenario.lip_bound)
    ell, payoff, n_disc = train_discriminator(f, ell0, scenario.collapsed, discriminator_tau,
                                              w_c, max_steps=max_discriminator_steps,
                                              config=config)
    slope = slope_estimate_x(f, ell, scenario.collapsed, rng=rng).value
    traj = run_dual_flow(ell, scenario.perturbed(), tau, T, f, config)
    w1 = np.array([w1_distance(mu, scenario.target) for mu in traj.ys])
    below = np.flatnonzero(w1 < w_c)
    escaped = below.size > 0
    return Diagnosis(float(w_c), float(payoff), n_disc, float(slope), bool(escaped),
                     int(below[0]) if escaped else None, float(w1.min()), float(w1[-1]),
                     "collapse is not stationary" if slope > 0 else "discriminator slope vanished",
                     tuple(traj.times), tuple(w1), traj)
