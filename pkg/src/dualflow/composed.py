"""Gradient flows through a parametrization ``g : R^n -> R^m``.

Gradients are row vectors, so the parameter flow of ``f o g`` reads
``x' = -grad f(g(x)) J(x)`` and the induced object-space motion is
``o' = -grad f(o) J J^T``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .numerics import fd_jacobian, relative_error


@dataclass
class Parametrization:
    """``g`` with its Jacobian and an objective ``f`` on the object space.

    Without an analytic ``jacobian`` a central finite-difference one is
    used.  An analytic Jacobian is checked against finite differences on
    ``check_points`` (or the origin) and rejected beyond ``check_tol``
    relative error.
    """

    g: Callable
    f: Callable
    grad_f: Callable
    jacobian: Callable | None = None
    n: int | None = None
    check_points: tuple = ()
    check_tol: float = 1e-5

    def __post_init__(self):
        if self.jacobian is None:
            self.jacobian = lambda x: fd_jacobian(self.g, x)
            return
        points = self.check_points
        if not points and self.n is not None:
            points = (np.zeros(self.n), np.linspace(-1.0, 1.0, self.n))
        for x in points:
            x = np.asarray(x, dtype=float)
            err = relative_error(self.jacobian(x), fd_jacobian(self.g, x))
            if err > self.check_tol:
                raise ValueError(f"jacobian disagrees with finite differences (rel. error {err:.3g})")

    def J(self, x) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.jacobian(np.asarray(x, dtype=float)), dtype=float))

    def composed_gradient(self, x) -> np.ndarray:
        """Chain rule row vector ``grad f(g(x)) J(x)``."""
        x = np.asarray(x, dtype=float)
        return np.asarray(self.grad_f(self.g(x)), dtype=float) @ self.J(x)

    @classmethod
    def affine(cls, A, b, f, grad_f) -> "Parametrization":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
        return cls(lambda x: A @ np.asarray(x, dtype=float) + b, f, grad_f,
                   jacobian=lambda x: A, n=A.shape[1])


def quadratic_objective(target):
    """``f(o) = |o - target|^2 / 2`` and its gradient."""
    target = np.asarray(target, dtype=float)
    return (lambda o: 0.5 * float(np.sum((np.asarray(o) - target) ** 2)),
            lambda o: np.asarray(o, dtype=float) - target)


def parameter_flow_step(x, h: float, p: Parametrization) -> np.ndarray:
    """Explicit Euler step of ``x' = -grad (f o g)(x)``."""
    x = np.asarray(x, dtype=float)
    return x - h * p.composed_gradient(x)


def object_flow_step(o, x, h: float, p: Parametrization) -> np.ndarray:
    """Explicit Euler step of ``o' = -grad f(o) J(x) J(x)^T``."""
    o = np.asarray(o, dtype=float)
    J = p.J(x)
    return o - h * (np.asarray(p.grad_f(o), dtype=float) @ J @ J.T)


@dataclass(frozen=True)
class CriticalityVerdict:
    is_param_stationary: bool
    jacobian_transpose_injective: bool
    grad_f_norm: float
    f_critical: bool
    composed_grad_norm: float
    sigma_min: float
    #: stationary and injective imply critical; False flags a counterexample
    implication_holds: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def stationary_criticality_check(x_inf, p: Parametrization, tol: float = 1e-6,
                                 stationary_tol: float | None = None,
                                 injective_tol: float | None = None) -> CriticalityVerdict:
    """Is a parameter-stationary point also critical for ``f``?

    Injectivity of ``J^T`` is measured by its smallest singular value,
    taken as zero when ``J`` has more rows than columns.  ``tol`` bounds
    the criticality test; the other two tolerances default to it.
    """
    stationary_tol = tol if stationary_tol is None else stationary_tol
    injective_tol = tol if injective_tol is None else injective_tol
    x = np.asarray(x_inf, dtype=float)
    J = p.J(x)
    cg = float(np.linalg.norm(p.composed_gradient(x)))
    gf = float(np.linalg.norm(p.grad_f(p.g(x))))
    # J^T maps R^m -> R^n; injective iff rank m
    sv = np.linalg.svd(J.T, compute_uv=False)
    sigma = float(sv[-1]) if J.shape[0] <= J.shape[1] else 0.0
    stationary = cg <= stationary_tol
    injective = sigma > injective_tol
    critical = gf <= tol
    holds = (not (stationary and injective)) or critical
    return CriticalityVerdict(stationary, injective, gf, critical, cg, sigma, holds)


def composed_instances(rng, count: int, max_dim: int):
    """Random full-rank quadratic-over-affine instances with their
    stationary points.

    ``A`` is ``m x n`` with ``m <= n`` and resampled until its smallest
    singular value is at least 0.05, so ``J^T`` is injective.
    """
    for _ in range(count):
        n = int(rng.integers(1, max_dim + 1))
        m = int(rng.integers(1, n + 1))
        A = rng.standard_normal((m, n))
        while np.linalg.svd(A, compute_uv=False)[-1] < 0.05:
            A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        target = rng.standard_normal(m)
        f, gf = quadratic_objective(target)
        p = Parametrization.affine(A, b, f, gf)
        x_star = np.linalg.lstsq(A, target - b, rcond=None)[0]
        yield p, x_star


def rank_deficient_instance():
    """``g(x) = (x_1, 0)`` with target ``(0, 1)``: every ``x`` with ``x_1 = 0``
    is parameter-stationary although ``grad f = (0, -1)``."""
    f, gf = quadratic_objective([0.0, 1.0])
    return Parametrization.affine([[1.0, 0.0], [0.0, 0.0]], None, f, gf), np.array([0.0, 0.7])
