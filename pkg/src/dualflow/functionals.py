"""Bivariate loss functionals ``C = (C^x, C^y)``, metric slopes and
sampling checks for the standing assumptions on ``C``.

Conventions: the first argument always belongs to the player updated first
(``x``), the second to the player updated second (``y``).  In the GAN
instances ``x`` is the discriminator and ``y`` the generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import fd_gradient
from .spaces import (EmpiricalMeasure, EuclideanSpace, GridFunctionSpace,
                     GridLipschitzFunction, MeasureSpace, expectation)


@dataclass(frozen=True)
class PartialLoss:
    """One player's loss with the other player frozen.

    Besides ``value`` the structure hints select an exact proximal solver:
    ``grad`` (Euclidean), ``potential`` (loss is ``E_mu(potential) + offset``
    on a measure space) or ``weights`` (loss is ``<weights, values> +
    offset`` on a grid-function space).
    """

    value: Callable
    grad: Callable | None = None
    grad_lipschitz: float | None = None
    potential: GridLipschitzFunction | None = None
    weights: np.ndarray | None = None
    offset: float = 0.0


class BivariateFunctional:
    """Base class.  Subclasses set ``space_x``/``space_y`` and implement
    ``eval_x``/``eval_y``; gradients, analytic slopes and Lipschitz
    constants of the gradients are optional (``None`` when absent)."""

    space_x = None
    space_y = None
    grad_x = None
    grad_y = None
    slope_x = None
    slope_y = None
    #: Lipschitz constants of u -> grad_x(u, y) and v -> grad_y(x, v)
    grad_lipschitz = (None, None)
    #: known assumption constants, e.g. {"A7": 1.0}; used by check harnesses
    known_bounds: dict = {}

    def eval_x(self, x, y) -> float:
        raise NotImplementedError

    def eval_y(self, x, y) -> float:
        raise NotImplementedError

    def partial_x(self, y) -> PartialLoss:
        grad = None if self.grad_x is None else (lambda u: self.grad_x(u, y))
        return PartialLoss(lambda u: self.eval_x(u, y), grad, self.grad_lipschitz[0])

    def partial_y(self, x) -> PartialLoss:
        grad = None if self.grad_y is None else (lambda v: self.grad_y(x, v))
        return PartialLoss(lambda v: self.eval_y(x, v), grad, self.grad_lipschitz[1])


class Functional(BivariateFunctional):
    """Functional assembled from plain callables."""

    def __init__(self, space_x, space_y, eval_x, eval_y, grad_x=None, grad_y=None,
                 slope_x=None, slope_y=None, grad_lipschitz=(None, None), known_bounds=None):
        self.space_x, self.space_y = space_x, space_y
        self._ex, self._ey = eval_x, eval_y
        self.grad_x, self.grad_y = grad_x, grad_y
        self.slope_x, self.slope_y = slope_x, slope_y
        self.grad_lipschitz = tuple(grad_lipschitz)
        self.known_bounds = dict(known_bounds or {})

    def eval_x(self, x, y):
        return float(self._ex(x, y))

    def eval_y(self, x, y):
        return float(self._ey(x, y))


def quadratic_energy(dim: int = 1) -> Functional:
    """``C^x(x, y) = |x|^2 / 2`` and ``C^y = 0``: the plain gradient flow
    ``x' = -x`` with a passive second player in ``R^1``."""
    return Functional(
        EuclideanSpace(dim), EuclideanSpace(1),
        lambda x, y: 0.5 * float(np.dot(x, x)),
        lambda x, y: 0.0,
        grad_x=lambda x, y: np.asarray(x, dtype=float).copy(),
        grad_y=lambda x, y: np.zeros_like(np.asarray(y, dtype=float)),
        slope_x=lambda x, y: float(np.linalg.norm(x)),
        slope_y=lambda x, y: 0.0,
        grad_lipschitz=(1.0, 0.0),
    )


def zero_functional(space_x, space_y, constant: float = 0.0) -> Functional:
    grad_x = grad_y = None
    if isinstance(space_x, EuclideanSpace):
        grad_x = lambda x, y: np.zeros_like(np.asarray(x, dtype=float))  # noqa: E731
    if isinstance(space_y, EuclideanSpace):
        grad_y = lambda x, y: np.zeros_like(np.asarray(y, dtype=float))  # noqa: E731
    return Functional(space_x, space_y, lambda x, y: constant, lambda x, y: constant,
                      grad_x=grad_x, grad_y=grad_y,
                      slope_x=lambda x, y: 0.0, slope_y=lambda x, y: 0.0,
                      grad_lipschitz=(0.0, 0.0))


class BilinearToyFunctional(BivariateFunctional):
    """Integral-probability-metric toy with a Dirac target ``x_r``.

    ``x`` is the discriminator ``d`` and ``y`` the generator ``g`` (both in
    ``R^dim``)::

        C^x(d, g) = -<d, g - x_r>,    C^y(d, g) = <d, g - x_r>

    so the alternating scheme reads ``d+ = d + tau (g - x_r)`` followed by
    ``g+ = g - tau d+``.
    """

    grad_lipschitz = (0.0, 0.0)

    def __init__(self, x_r, box: float = 10.0):
        self.x_r = np.asarray(x_r, dtype=float)
        dim = self.x_r.size
        self.space_x = EuclideanSpace(dim, box)
        self.space_y = EuclideanSpace(dim, box)

    def eval_x(self, d, g):
        return -float(np.dot(d, np.asarray(g) - self.x_r))

    def eval_y(self, d, g):
        return float(np.dot(d, np.asarray(g) - self.x_r))

    def grad_x(self, d, g):
        return -(np.asarray(g, dtype=float) - self.x_r)

    def grad_y(self, d, g):
        return np.asarray(d, dtype=float).copy()

    def slope_x(self, d, g):
        return float(np.linalg.norm(np.asarray(g) - self.x_r))

    def slope_y(self, d, g):
        return float(np.linalg.norm(d))

    @property
    def known_bounds(self):
        # mixed differences are exactly -<u - w, v - y>
        return {"A7": 1.0}


class WganFunctional(BivariateFunctional):
    """Wasserstein-GAN loss pair with discriminator ``x = l`` and generator
    ``y = mu``::

        C^x(l, mu) = -E_mu(l) + E_target(l),   C^y(l, mu) = E_mu(l) - E_target(l)

    Both components are computed from the same two averages so their sum is
    exactly zero in floating point.
    """

    def __init__(self, target: EmpiricalMeasure, space_x: GridFunctionSpace,
                 space_y: MeasureSpace):
        self.target = target
        self.space_x = space_x
        self.space_y = space_y
        self._target_weights = space_x.grid.interp_weights(target.particles)

    def _averages(self, ell, mu):
        return expectation(ell, mu), expectation(ell, self.target)

    def eval_x(self, ell, mu):
        e_mu, e_r = self._averages(ell, mu)
        return -e_mu + e_r

    def eval_y(self, ell, mu):
        e_mu, e_r = self._averages(ell, mu)
        return e_mu - e_r

    def payoff(self, ell, mu) -> float:
        """Discriminator payoff ``E_mu(l) - E_target(l)``."""
        return self.eval_y(ell, mu)

    def partial_x(self, mu):
        weights = self._target_weights - self.space_x.grid.interp_weights(mu.particles)
        return PartialLoss(lambda ell: self.eval_x(ell, mu), weights=weights)

    def partial_y(self, ell):
        return PartialLoss(lambda mu: self.eval_y(ell, mu), potential=ell,
                           offset=-expectation(ell, self.target))

    @property
    def known_bounds(self):
        grid = self.space_x.grid
        return {"A7": 1.0, "A1": self.space_x.lip_bound * (grid.hi - grid.lo)}


# --------------------------------------------------------------------------
# slopes


@dataclass(frozen=True)
class SlopeEstimate:
    value: float
    sampled: float
    analytic: bool
    #: sampled values only bound the true limsup from below
    label: str = "lower-bound estimate"


def _sampled_slope(space, loss, p, radius_schedule, n_directions, rng, use_hint=True):
    base = loss(p)
    hint = None
    row = space.to_row(p)
    if use_hint and row.size <= 512:
        hint = fd_gradient(lambda r: loss(space.from_row(r)), row)
    best = 0.0
    for direction in space.directions(p, rng, n_directions, hint):
        for r in radius_schedule:
            u = space.displace(p, direction, r)
            d = space.distance(p, u)
            if d > 0.0:
                best = max(best, max(base - loss(u), 0.0) / d)
    return best


def slope_estimate_x(f: BivariateFunctional, x, y, radius_schedule=(1e-2, 1e-3, 1e-4),
                     n_directions: int = 64, rng=None) -> SlopeEstimate:
    """Slope of ``u -> C^x(u, y)`` at ``x``: max positive difference quotient
    over sampled perturbations; the analytic slope wins when available."""
    rng = np.random.default_rng(0) if rng is None else rng
    sampled = _sampled_slope(f.space_x, lambda u: f.eval_x(u, y), x,
                             radius_schedule, n_directions, rng)
    if f.slope_x is not None:
        return SlopeEstimate(float(f.slope_x(x, y)), sampled, True, "analytic")
    return SlopeEstimate(sampled, sampled, False)


def slope_estimate_y(f: BivariateFunctional, x, y, radius_schedule=(1e-2, 1e-3, 1e-4),
                     n_directions: int = 64, rng=None) -> SlopeEstimate:
    rng = np.random.default_rng(0) if rng is None else rng
    sampled = _sampled_slope(f.space_y, lambda v: f.eval_y(x, v), y,
                             radius_schedule, n_directions, rng)
    if f.slope_y is not None:
        return SlopeEstimate(float(f.slope_y(x, y)), sampled, True, "analytic")
    return SlopeEstimate(sampled, sampled, False)


# --------------------------------------------------------------------------
# assumption checks


@dataclass
class AssumptionReport:
    assumption: str
    samples: int
    estimate: float
    violated: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"assumption": self.assumption, "samples": self.samples,
                "estimate": self.estimate, "violated": self.violated}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _samplers(f, sampler_x, sampler_y):
    return (sampler_x or f.space_x.sample), (sampler_y or f.space_y.sample)


def _near(space, p, rng, radius):
    direction = rng.standard_normal(len(space.to_row(p)))
    return space.displace(p, direction, radius)


def check_a1_lower_bound(f, sample_count: int = 1000, rng=None, sampler_x=None,
                         sampler_y=None, c1: float | None = None) -> AssumptionReport:
    """Smallest value of ``C^x`` and ``C^y`` seen on random states.

    ``violated`` is set when a value is not finite or drops below ``-c1``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sx, sy = _samplers(f, sampler_x, sampler_y)
    lowest = math.inf
    for _ in range(sample_count):
        x, y = sx(rng), sy(rng)
        lowest = min(lowest, f.eval_x(x, y), f.eval_y(x, y))
    violated = not math.isfinite(lowest) or (c1 is not None and lowest < -c1)
    return AssumptionReport("A1", sample_count, lowest, violated, {"min_seen": lowest, "c1": c1})


def check_a5_lipschitz_second_arg(f, sample_count: int = 500, rng=None, sampler_x=None,
                                  sampler_y=None, bound: float | None = None,
                                  local_radius: float = 1e-2) -> AssumptionReport:
    """Lipschitz ratio of ``C^x`` in its second slot and ``C^y`` in its first.

    Half the pairs are independent draws, half are local perturbations.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sx, sy = _samplers(f, sampler_x, sampler_y)
    worst = 0.0
    for k in range(sample_count):
        x, y = sx(rng), sy(rng)
        local = k % 2 == 1
        y2 = _near(f.space_y, y, rng, local_radius) if local else sy(rng)
        x2 = _near(f.space_x, x, rng, local_radius) if local else sx(rng)
        dy = f.space_y.distance(y, y2)
        dx = f.space_x.distance(x, x2)
        if dy > 0:
            worst = max(worst, abs(f.eval_x(x, y) - f.eval_x(x, y2)) / dy)
        if dx > 0:
            worst = max(worst, abs(f.eval_y(x, y) - f.eval_y(x2, y)) / dx)
    violated = bound is not None and worst > bound * (1 + 1e-9)
    return AssumptionReport("A5", sample_count, worst, violated, {"L_estimate": worst})


def mixed_difference(c, u, w, v, y) -> float:
    """``c(u, v) - c(u, y) - c(w, v) + c(w, y)``."""
    return c(u, v) - c(u, y) - c(w, v) + c(w, y)


def check_a7_double_lipschitz(f, sample_count: int = 500, rng=None, sampler_x=None,
                              sampler_y=None, bound: float | None = None,
                              local_radius: float = 1e-2) -> AssumptionReport:
    """Largest ratio ``|mixed difference| / (d(u, w) d(v, y))`` for both
    components; an empirical value of the double-Lipschitz constant."""
    rng = np.random.default_rng(0) if rng is None else rng
    sx, sy = _samplers(f, sampler_x, sampler_y)
    worst = 0.0
    for k in range(sample_count):
        u, v = sx(rng), sy(rng)
        local = k % 2 == 1
        w = _near(f.space_x, u, rng, local_radius) if local else sx(rng)
        y = _near(f.space_y, v, rng, local_radius) if local else sy(rng)
        denom = f.space_x.distance(u, w) * f.space_y.distance(v, y)
        if denom <= 0:
            continue
        for c in (f.eval_x, f.eval_y):
            worst = max(worst, abs(mixed_difference(c, u, w, v, y)) / denom)
    violated = bound is not None and worst > bound * (1 + 1e-9)
    return AssumptionReport("A7", sample_count, worst, violated, {"C_L_estimate": worst})
