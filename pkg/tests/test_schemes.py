import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from dualflow.errors import ParticleEscapeError, StepFailure, UnsupportedConfigurationError
from dualflow.functionals import (BilinearToyFunctional, Functional, PartialLoss,
                                  WganFunctional, quadratic_energy, zero_functional)
from dualflow.schemes import (ProxConfig, Trajectory, compare_schemes, de_giorgi_curve,
                              de_giorgi_interpolate, explicit_step, prox, prox_step_x,
                              prox_step_y, run_dual_flow, run_explicit, steps_for, sup_gap,
                              tau_sweep)
from dualflow.spaces import (EmpiricalMeasure, EuclideanSpace, Grid, GridFunctionSpace,
                             GridLipschitzFunction, MeasureSpace, expectation)

ONE = np.array([1.0])
ZERO = np.zeros(1)


def rotation_step_matrix(tau):
    """Linear map (d, g - x_r) -> next state of the alternating toy scheme."""
    return np.array([[1.0, tau], [-tau, 1.0 - tau * tau]])


# -- single proximal steps -------------------------------------------------------


def test_prox_quadratic_closed_form():
    f = quadratic_energy(1)
    x, cert = prox_step_x(ONE, ZERO, 0.5, f)
    assert x[0] == pytest.approx(2.0 / 3.0, abs=1e-10)
    assert cert.residual <= 1e-10


def test_prox_quadratic_picard_small_tau():
    f = quadratic_energy(1)
    x, cert = prox_step_x(ONE, ZERO, 0.1, f)
    assert cert.solver == "picard"
    assert x[0] == pytest.approx(1 / 1.1, abs=1e-10)


def test_prox_forced_picard_refuses_large_tau():
    with pytest.raises(ValueError):
        prox_step_x(ONE, ZERO, 2.0, quadratic_energy(1), ProxConfig(inner_solver="picard"))


def test_prox_armijo_on_large_tau():
    x, cert = prox_step_x(ONE, ZERO, 5.0, quadratic_energy(1),
                          ProxConfig(inner_solver="gradient-armijo"))
    assert cert.solver == "gradient-armijo"
    assert x[0] == pytest.approx(1 / 6.0, abs=1e-9)


def test_prox_constant_is_identity():
    f = zero_functional(EuclideanSpace(2), EuclideanSpace(2), 1.0)
    x, _ = prox_step_x(np.array([0.3, 0.4]), np.zeros(2), 0.7, f)
    assert np.allclose(x, [0.3, 0.4])


def test_prox_zero_step_is_identity():
    x, cert = prox(EuclideanSpace(1), ONE, quadratic_energy(1).partial_x(ZERO), 0.0)
    assert x is ONE and cert.solver == "identity"


def test_bilinear_steps_reproduce_alternating_recurrence():
    x_r = np.array([0.5, -1.0])
    f = BilinearToyFunctional(x_r)
    d, g, tau = np.array([0.2, 0.1]), np.array([1.0, 2.0]), 0.1
    d1, _ = prox_step_x(d, g, tau, f)
    assert np.allclose(d1, d + tau * (g - x_r), atol=1e-12)
    g1, _ = prox_step_y(d1, g, tau, f)
    assert np.allclose(g1, g - tau * d1, atol=1e-12)


def test_prox_without_gradient_unsupported():
    f = Functional(EuclideanSpace(1), EuclideanSpace(1), lambda x, y: 0.0, lambda x, y: 0.0)
    with pytest.raises(UnsupportedConfigurationError):
        prox_step_x(ONE, ZERO, 0.1, f)


def test_uncertified_step_raises():
    f = Functional(EuclideanSpace(1), EuclideanSpace(1),
                   lambda x, y: float(np.cosh(3 * x[0])), lambda x, y: 0.0,
                   grad_x=lambda x, y: 3 * np.sinh(3 * x), grad_y=lambda x, y: 0 * y)
    with pytest.raises(StepFailure), np.errstate(over="ignore"):
        prox_step_x(np.array([4.0]), ZERO, 1.0, f, ProxConfig(inner_max_iter=2))


def test_monotone_check_catches_bad_solver(monkeypatch):
    import dualflow.schemes as schemes

    def liar(x, partial, tau, config):
        return x + 1.0, schemes.Certificate("picard", 1, 0.0)

    monkeypatch.setattr(schemes, "_prox_euclidean", liar)
    with pytest.raises(StepFailure):
        prox_step_x(ONE, ZERO, 0.1, quadratic_energy(1))


# -- measure and grid proxes -------------------------------------------------------


def _brute_scalar(q, tau, ell, n=200001):
    xs = np.linspace(ell.grid.lo, ell.grid.hi, n)
    obj = (xs - q) ** 2 / (2 * tau) + ell(xs)
    return xs[np.argmin(obj)], obj.min()


def test_w2_prox_matches_brute_force():
    grid = Grid(0.0, 1.0, 11)
    rng = np.random.default_rng(0)
    space = GridFunctionSpace(grid)
    for _ in range(20):
        ell = space.sample(rng)
        mu = EmpiricalMeasure(rng.uniform(0.2, 0.8, 3))
        tau = float(rng.uniform(0.01, 0.2))
        partial = PartialLoss(lambda m: expectation(ell, m), potential=ell)
        try:
            out, cert = prox(MeasureSpace(3), mu, partial, tau)
        except ParticleEscapeError:
            continue
        assert cert.solver == "per-particle-scalar"
        for q, p in zip(mu.sorted(), out.sorted()):
            _, best = _brute_scalar(q, tau, ell)
            got = (p - q) ** 2 / (2 * tau) + ell(p)
            assert got <= best + 1e-9


def test_w2_prox_particle_escape():
    grid = Grid(0.0, 1.0, 11)
    ell = GridLipschitzFunction(grid, grid.knots.copy())  # pushes particles left
    partial = PartialLoss(lambda m: expectation(ell, m), potential=ell)
    with pytest.raises(ParticleEscapeError):
        prox(MeasureSpace(1), EmpiricalMeasure([0.05]), partial, 1.0)


def test_w1_prox_is_coordinatewise_optimal():
    # cyclic coordinate descent is a local method; check each particle is optimal given the rest
    grid = Grid(0.0, 1.0, 11)
    rng = np.random.default_rng(1)
    space = GridFunctionSpace(grid)
    mspace = MeasureSpace(2, prox_order=1)
    xs = np.linspace(0, 1, 20001)
    for _ in range(8):
        ell = space.sample(rng)
        mu = EmpiricalMeasure(rng.uniform(0.3, 0.7, 2))
        tau = 0.05
        partial = PartialLoss(lambda m: expectation(ell, m), potential=ell)
        out, cert = prox(mspace, mu, partial, tau)
        assert cert.solver == "coordinate-descent"
        q, p = mu.sorted(), out.sorted()
        start = partial.value(mu)
        got = mspace.prox_distance(out, mu) ** 2 / (2 * tau) + partial.value(out)
        assert got <= start + 1e-12
        for i in range(2):
            rest = abs(p[1 - i] - q[1 - i])
            obj = ((rest + np.abs(xs - q[i])) / 2) ** 2 / (2 * tau) + (ell(xs) + ell(p[1 - i])) / 2
            assert got <= obj.min() + 1e-9


def test_grid_prox_matches_slsqp():
    grid = Grid(0.0, 1.0, 9)
    space = GridFunctionSpace(grid)
    rng = np.random.default_rng(2)
    A = space.prox_matrix
    c = grid.spacing
    for _ in range(5):
        ell = space.sample(rng)
        w = rng.normal(size=9) / 9
        tau = 0.3
        partial = PartialLoss(lambda e: float(w @ e.values), weights=w)
        out, cert = prox(space, ell, partial, tau)
        assert cert.solver == "active-set"

        def obj(v):
            d = v - ell.values
            return d @ A @ d / (2 * tau) + w @ v

        cons = [{"type": "ineq", "fun": lambda v, i=i, s=s: c - s * (v[i + 1] - v[i])}
                for i in range(8) for s in (1.0, -1.0)]
        ref = minimize(obj, ell.values, constraints=cons, method="SLSQP",
                       options={"ftol": 1e-15, "maxiter": 1000})
        assert obj(out.values) <= ref.fun + 1e-10
        assert np.max(np.abs(np.diff(out.values))) <= c * (1 + 1e-12)


def test_grid_prox_needs_linear_loss():
    space = GridFunctionSpace(Grid(0.0, 1.0, 5))
    ell = GridLipschitzFunction(space.grid, np.zeros(5))
    with pytest.raises(UnsupportedConfigurationError):
        prox(space, ell, PartialLoss(lambda e: 0.0), 0.1)


# -- trajectories -----------------------------------------------------------------


def test_steps_for():
    assert steps_for(1.0, 0.1) == 10
    with pytest.raises(ValueError):
        steps_for(1.0, 0.3)


def test_bilinear_orbit_returns():
    f = BilinearToyFunctional([0.0, 0.0])
    n = 628
    tau = 2 * math.pi / n
    traj = run_dual_flow(np.zeros(2), np.array([1.0, 0.0]), tau, n * tau, f)
    state = np.linalg.matrix_power(rotation_step_matrix(tau), n) @ np.array([0.0, 1.0])
    assert traj.xs[-1][0] == pytest.approx(state[0], abs=1e-10)
    assert traj.ys[-1][0] == pytest.approx(state[1], abs=1e-10)
    dist = math.hypot(np.linalg.norm(traj.xs[-1]), np.linalg.norm(traj.ys[-1] - [1.0, 0.0]))
    assert dist <= 0.1


def test_quadratic_flow_product_formula():
    f = quadratic_energy(1)
    errs = []
    for tau in (0.1, 0.05, 0.025):
        traj = run_dual_flow(ONE, ZERO, tau, 1.0, f)
        n = traj.n_steps
        assert traj.xs[-1][0] == pytest.approx((1 + tau) ** -n, abs=1e-10)
        errs.append(abs(traj.xs[-1][0] - math.exp(-1)))
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.05)


def test_zero_functional_constant_trajectory():
    f = zero_functional(EuclideanSpace(2), EuclideanSpace(1))
    traj = run_dual_flow(np.array([1.0, 2.0]), np.array([3.0]), 0.1, 1.0, f)
    assert all(np.array_equal(x, [1.0, 2.0]) for x in traj.xs)


def test_run_dual_flow_rejects_partial_steps():
    with pytest.raises(ValueError):
        run_dual_flow(ONE, ZERO, 0.3, 1.0, quadratic_energy(1))


def test_step_failure_carries_index(monkeypatch):
    import dualflow.schemes as schemes
    real = schemes.prox_step_x
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise StepFailure("boom", residual=1.0)
        return real(*a, **k)

    monkeypatch.setattr(schemes, "prox_step_x", flaky)
    with pytest.raises(StepFailure) as info:
        run_dual_flow(ONE, ZERO, 0.1, 1.0, quadratic_energy(1))
    assert info.value.step_index == 2


def test_swap_order_moves_second_player_first():
    x_r = np.zeros(1)
    f = BilinearToyFunctional(x_r)
    d0, g0 = np.array([0.5]), np.array([1.0])
    tau = 0.1
    traj = run_dual_flow(d0, g0, tau, tau, f, swap_order=True)
    g1 = g0 - tau * d0
    assert traj.ys[1][0] == pytest.approx(g1[0])
    assert traj.xs[1][0] == pytest.approx((d0 + tau * g1)[0])


def test_substeps_repeat_first_player():
    f = BilinearToyFunctional(np.zeros(1))
    traj = run_dual_flow(np.array([0.0]), np.array([1.0]), 0.1, 0.1, f, x_substeps=3)
    assert traj.xs[1][0] == pytest.approx(0.3)
    with pytest.raises(ValueError):
        run_dual_flow(ONE, ONE, 0.1, 0.1, f, x_substeps=0)


def test_trajectory_invariants_and_output(tmp_path):
    f = quadratic_energy(2)
    traj = run_dual_flow(np.array([1.0, -1.0]), ZERO, 0.1, 0.5, f)
    assert np.array_equal(traj.xs[0], [1.0, -1.0])
    assert traj.max_residual() <= 1e-10
    traj.write(tmp_path / "t.csv", tmp_path / "t.json")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,x_point_dim_0,x_point_dim_1,y_point_dim_0"
    assert len(lines) == 7
    side = json.loads((tmp_path / "t.json").read_text())
    assert set(side) == {"tau", "T", "steps", "inner_solver", "certificates_summary"}
    assert side["steps"] == 5


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 0.4))
def test_prox_steps_are_monotone(x0, tau):
    f = Functional(EuclideanSpace(1), EuclideanSpace(1),
                   lambda x, y: float(np.log(np.cosh(x[0]))), lambda x, y: 0.0,
                   grad_x=lambda x, y: np.tanh(x), grad_y=lambda x, y: 0 * y,
                   grad_lipschitz=(1.0, 0.0))
    x = np.array([x0])
    u, _ = prox_step_x(x, ZERO, tau, f)
    assert (u - x)[0] ** 2 / (2 * tau) + f.eval_x(u, ZERO) <= f.eval_x(x, ZERO) + 1e-12


# -- de Giorgi interpolation --------------------------------------------------------


def test_de_giorgi_quadratic_offsets():
    f = quadratic_energy(1)
    traj = run_dual_flow(ONE, ZERO, 0.1, 0.5, f)
    k = 2
    xk = traj.xs[k][0]
    for s in (0.01, 0.05, 0.09):
        x, _ = de_giorgi_interpolate(traj, k * 0.1 + s, f)
        assert x[0] == pytest.approx(xk / (1 + s), abs=1e-10)


def test_de_giorgi_at_knots():
    f = quadratic_energy(1)
    traj = run_dual_flow(ONE, ZERO, 0.1, 0.5, f)
    x, _ = de_giorgi_interpolate(traj, 0.0, f)
    assert x is traj.xs[0]
    for k in range(1, 6):
        x, y = de_giorgi_interpolate(traj, k * 0.1, f)
        assert abs(x[0] - traj.xs[k][0]) <= 1e-9


def test_de_giorgi_detects_inconsistent_trajectory():
    f = quadratic_energy(1)
    traj = run_dual_flow(ONE, ZERO, 0.1, 0.2, f)
    bad = Trajectory(0.1, (traj.xs[0], traj.xs[1] + 0.1, traj.xs[2]), traj.ys,
                     traj.space_x, traj.space_y)
    with pytest.raises(StepFailure):
        de_giorgi_interpolate(bad, 0.1, f)


def test_de_giorgi_curve_density():
    f = quadratic_energy(1)
    traj = run_dual_flow(ONE, ZERO, 0.1, 0.3, f)
    c = de_giorgi_curve(traj, f, per_step=4)
    assert len(c.x.times) == 13
    assert c.x.at(0.15)[0] == pytest.approx(traj.xs[1][0] / 1.05, abs=1e-10)


# -- explicit scheme and comparisons -----------------------------------------------


def test_explicit_bilinear_matches_implicit_recurrence():
    f = BilinearToyFunctional(np.array([0.0, 1.0]))
    d, g = np.array([0.1, 0.2]), np.array([1.0, 0.0])
    d1, g1 = explicit_step(d, g, 0.05, f)
    assert np.allclose(d1, d + 0.05 * (g - f.x_r))
    assert np.allclose(g1, g - 0.05 * d1)


def test_explicit_quadratic_and_zero():
    x1, _ = explicit_step(np.array([2.0]), ZERO, 0.1, quadratic_energy(1))
    assert x1[0] == pytest.approx(1.8)
    zf = zero_functional(EuclideanSpace(1), EuclideanSpace(1))
    traj = run_explicit(ONE, ONE, 0.1, 1.0, zf)
    assert all(x[0] == 1.0 for x in traj.xs)


def test_explicit_needs_gradients():
    f = Functional(EuclideanSpace(1), EuclideanSpace(1), lambda x, y: 0.0, lambda x, y: 0.0)
    with pytest.raises(UnsupportedConfigurationError):
        explicit_step(ONE, ONE, 0.1, f)


def test_compare_schemes_tanh_budget():
    res = compare_schemes(2.0, 0.01, 1.0, lambda x: -np.tanh(x), L=1.0, C_f=1.0)
    assert res.budget == pytest.approx(0.01 * math.exp(0.01))
    assert res.passed and res.gap > 0


def test_compare_schemes_halving_ratio():
    f = lambda x: -np.tanh(x)  # noqa: E731
    a = compare_schemes(2.0, 0.02, 1.0, f, L=1.0, C_f=1.0)
    b = compare_schemes(2.0, 0.01, 1.0, f, L=1.0, C_f=1.0)
    assert 0.4 <= b.gap / a.gap <= 0.6


def test_compare_schemes_zero_field():
    res = compare_schemes(np.array([1.0, 2.0]), 0.1, 1.0, lambda x: np.zeros_like(x), L=1.0, C_f=0.0)
    assert res.gap == 0.0


def test_compare_schemes_estimates_constants():
    res = compare_schemes(2.0, 0.01, 1.0, lambda x: -np.tanh(x), rng=np.random.default_rng(0))
    assert res.L == pytest.approx(1.0, rel=1e-2)
    assert res.C_f == pytest.approx(1.0, rel=1e-2)


# -- tau sweeps ------------------------------------------------------------------------


def test_sweep_quadratic_halves():
    rep = tau_sweep(ONE, ZERO, 1.0, quadratic_energy(1), [0.1, 0.05, 0.025, 0.0125])
    assert rep.monotone
    assert all(0.45 <= r <= 0.55 for r in rep.ratios)
    assert rep.order == pytest.approx(1.0, abs=0.1)


def test_sweep_bilinear_extrapolated_radius():
    f = BilinearToyFunctional([0.0, 0.0])
    T = 2 * math.pi
    taus = [T / (157 * 2 ** k) for k in range(4)]
    rep = tau_sweep(np.zeros(2), np.array([1.0, 0.0]), T, f, taus)
    assert rep.monotone
    coarse, fine = rep.trajectories[-2], rep.trajectories[-1]
    for k in range(coarse.n_steps + 1):
        d = 2 * fine.xs[2 * k] - coarse.xs[k]
        g = 2 * fine.ys[2 * k] - coarse.ys[k]
        assert np.linalg.norm(d) ** 2 + np.linalg.norm(g) ** 2 == pytest.approx(1.0, rel=1e-2)


def test_sweep_constant_and_parallel():
    zf = zero_functional(EuclideanSpace(1), EuclideanSpace(1))
    rep = tau_sweep(ONE, ONE, 1.0, zf, [0.1, 0.05, 0.025])
    assert rep.gaps == (0.0, 0.0)
    f = quadratic_energy(1)
    serial = tau_sweep(ONE, ZERO, 1.0, f, [0.1, 0.05, 0.025])
    par = tau_sweep(ONE, ZERO, 1.0, f, [0.1, 0.05, 0.025], parallel=3)
    assert serial.gaps == par.gaps


def test_sweep_validation():
    f = quadratic_energy(1)
    with pytest.raises(ValueError):
        tau_sweep(ONE, ZERO, 1.0, f, [0.05, 0.1])
    with pytest.raises(ValueError):
        tau_sweep(ONE, ZERO, 1.0, f, [0.3, 0.1])


def test_sup_gap_self_is_zero():
    traj = run_dual_flow(ONE, ZERO, 0.1, 1.0, quadratic_energy(1))
    assert sup_gap(traj, traj) == 0.0


def test_wgan_flow_is_antisymmetric_along_trajectory():
    grid = Grid(0.0, 1.0, 21)
    f = WganFunctional(EmpiricalMeasure([0.5]), GridFunctionSpace(grid), MeasureSpace(1))
    traj = run_dual_flow(GridLipschitzFunction(grid, np.zeros(21)), EmpiricalMeasure([0.3]),
                         0.05, 1.0, f)
    for ell, mu in traj.steps:
        assert f.eval_x(ell, mu) + f.eval_y(ell, mu) == 0.0
