import math

import numpy as np
import pytest

from dualflow.errors import OutOfDomainError
from dualflow.functionals import Functional, quadratic_energy
from dualflow.metric import (Curve, CurvePair, Division, metric_derivative, upsilon,
                             upsilon_refined, upsilon_x, upsilon_y)
from dualflow.spaces import EuclideanSpace

R1 = EuclideanSpace(1)
R2 = EuclideanSpace(2)


def scalar_functional(cx, cy=lambda x, y: 0.0):
    return Functional(R1, R1, lambda x, y: cx(float(x[0]), float(y[0])),
                      lambda x, y: cy(float(x[0]), float(y[0])))


def pair(times, xv, yv):
    return CurvePair(Curve(times, [np.array([v]) for v in xv], R1),
                     Curve(times, [np.array([v]) for v in yv], R1))


# -- curves -----------------------------------------------------------------


def test_curve_rejects_bad_times():
    with pytest.raises(ValueError):
        Curve([0.0, 0.0], [np.zeros(1)] * 2, R1)
    with pytest.raises(ValueError):
        Curve([0.0], [np.zeros(1)], R1)
    with pytest.raises(ValueError):
        Curve([0.0, 1.0], [np.zeros(1)], R1)


def test_curve_at_uses_nearest_sample_without_evaluator():
    c = Curve([0.0, 1.0, 2.0], [np.array([0.0]), np.array([5.0]), np.array([7.0])], R1)
    assert c.at(0.9)[0] == 5.0
    assert c.at(1.6)[0] == 7.0
    with pytest.raises(OutOfDomainError):
        c.at(2.5)


def test_curve_csv_roundtrip(tmp_path):
    c = Curve.from_function(lambda t: np.array([t, t ** 2]), np.linspace(0, 1, 5), R2)
    path = tmp_path / "c.csv"
    c.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "t,point_dim_0,point_dim_1"
    back = Curve.from_csv(path, R2)
    assert np.array_equal(back.times, c.times)
    for a, b in zip(back.points, c.points):
        assert np.array_equal(a, b)


# -- metric derivative ------------------------------------------------------


def test_metric_derivative_line():
    c = Curve.from_function(lambda t: np.array([t, 2 * t]), np.linspace(0, 2, 21), R2)
    assert metric_derivative(c, 1.0) == pytest.approx(math.sqrt(5), rel=1e-9)


def test_metric_derivative_constant_curve():
    c = Curve.from_function(lambda t: np.array([3.0, -1.0]), np.linspace(0, 2, 5), R2)
    assert metric_derivative(c, 0.7) == 0.0


@pytest.mark.parametrize("h", [1e-3, 1e-4])
def test_metric_derivative_exponential(h):
    c = Curve.from_function(lambda t: np.array([math.exp(-t)]), np.linspace(0, 2, 3), R1)
    assert metric_derivative(c, 1.0, h=h) == pytest.approx(math.exp(-1), rel=1e-6)


def test_metric_derivative_sampled_brackets():
    times = np.linspace(0, 2, 2001)
    c = Curve(times, [np.array([math.exp(-t)]) for t in times], R1)
    assert metric_derivative(c, 1.0) == pytest.approx(math.exp(-1), rel=1e-6)


def test_metric_derivative_speed_override():
    c = Curve.from_function(lambda t: np.array([t]), [0.0, 1.0], R1, speed=lambda r: 42.0)
    assert metric_derivative(c, 0.5) == 42.0


def test_metric_derivative_out_of_range():
    c = Curve.from_function(lambda t: np.array([t]), [0.0, 1.0], R1)
    for r in (0.0, 1.0, -1.0):
        with pytest.raises(OutOfDomainError):
            metric_derivative(c, r)


def test_metric_derivative_of_geodesic_equals_distance():
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    c = Curve.from_function(lambda s: R2.interpolate(a, b, s), np.linspace(0, 1, 11), R2)
    assert metric_derivative(c, 0.4) == pytest.approx(R2.distance(a, b), abs=1e-6)


# -- divisions and upsilon --------------------------------------------------


def test_division_validation_and_mesh():
    d = Division.uniform(0.0, 1.0, 0.3)
    assert d.a == 0.0 and d.b == 1.0
    assert d.mesh <= 0.3
    with pytest.raises(ValueError):
        Division([0.0, 0.5, 0.5])


def test_upsilon_x_product():
    f = scalar_functional(lambda x, y: x * y)
    z = pair([0.0, 0.5, 1.0], [0, 1, 2], [1, 1, 1])
    assert upsilon_x(Division([0.0, 0.5, 1.0]), z, f) == pytest.approx(2.0)


def test_upsilon_x_independent_of_x():
    f = scalar_functional(lambda x, y: y ** 2)
    z = pair([0.0, 0.5, 1.0], [0, 3, -2], [1, 4, 2])
    assert upsilon_x(Division([0.0, 0.5, 1.0]), z, f) == 0.0


def test_upsilon_x_negative_product():
    f = scalar_functional(lambda x, y: -x * y)
    z = pair([0.0, 1.0, 2.0], [1, 0.5, 0.25], [0, 1, 2])
    div = Division([0.0, 1.0, 2.0])
    brute = sum(-xb * ya + xa * ya for xa, xb, ya in [(1, 0.5, 0), (0.5, 0.25, 1)])
    assert upsilon_x(div, z, f) == pytest.approx(0.25)
    assert brute == pytest.approx(0.25)


def test_upsilon_antisymmetric_pair():
    f = scalar_functional(lambda x, y: -x * y, lambda x, y: x * y)
    z = pair([0.0, 1.0, 2.0], [1, 1, 1], [0, 1, 2])
    div = Division([0.0, 1.0, 2.0])
    assert upsilon_x(div, z, f) == 0.0
    assert upsilon_y(div, z, f) == pytest.approx(2.0)
    assert upsilon_y(div, z, f, convention="lagged") == pytest.approx(2.0)
    assert upsilon(div, z, f) == pytest.approx(2.0)


def test_upsilon_conventions_differ_when_x_moves():
    f = scalar_functional(lambda x, y: 0.0, lambda x, y: x * y)
    z = pair([0.0, 1.0], [1, 3], [0, 1])
    div = Division([0.0, 1.0])
    assert upsilon_y(div, z, f, "left") == 1.0
    assert upsilon_y(div, z, f, "lagged") == 3.0
    with pytest.raises(ValueError):
        upsilon_y(div, z, f, "right")


def test_upsilon_constant_components():
    f = scalar_functional(lambda x, y: 5.0, lambda x, y: -1.0)
    z = pair([0.0, 1.0, 2.0], [1, 2, 3], [4, 5, 6])
    assert upsilon(Division([0.0, 1.0, 2.0]), z, f) == 0.0


def test_upsilon_knot_outside_range():
    f = scalar_functional(lambda x, y: x)
    z = pair([0.0, 1.0], [0, 1], [0, 1])
    with pytest.raises(OutOfDomainError):
        upsilon(Division([0.0, 2.0]), z, f)


def test_upsilon_additive_over_adjacent_intervals():
    f = scalar_functional(lambda x, y: x ** 2 * y, lambda x, y: math.sin(x) * y ** 2)
    z = CurvePair.from_function(lambda t: (np.array([math.cos(t)]), np.array([t ** 2])),
                                np.linspace(0, 2, 9), R1, R1)
    d1 = Division.uniform(0.0, 1.0, 0.1)
    d2 = Division.uniform(1.0, 2.0, 0.1)
    whole = Division(np.concatenate([d1.knots, d2.knots[1:]]))
    total = upsilon(whole, z, f)
    assert total == pytest.approx(upsilon(d1, z, f) + upsilon(d2, z, f), rel=1e-12)


def test_upsilon_refinement_first_order():
    # C^x = x^2 y along x = t, y = 1 + t: exact liminf is int 2 t (1 + t) dt
    f = scalar_functional(lambda x, y: x * x * y)
    z = CurvePair.from_function(lambda t: (np.array([t]), np.array([1 + t])),
                                [0.0, 1.0], R1, R1)
    exact = 1.0 + 2.0 / 3.0
    errs = [abs(upsilon(Division.uniform(0, 1, m), z, f) - exact) for m in (0.1, 0.05, 0.025)]
    assert errs[1] / errs[0] == pytest.approx(0.5, abs=0.05)
    assert errs[2] / errs[1] == pytest.approx(0.5, abs=0.05)


def test_upsilon_refined_energy_case():
    f = quadratic_energy(1)
    z = CurvePair.from_function(lambda t: (np.array([math.exp(-t)]), np.zeros(1)),
                                [0.0, 1.0], R1, R1)
    res = upsilon_refined(z, f, 0.2, 1.0)
    target = 0.5 * (math.exp(-2.0) - math.exp(-0.4))
    assert res.values[-1] == pytest.approx(target, abs=1e-12)
    assert len(res.values) == 3 and res.converged


def test_upsilon_refined_examples_and_flag():
    f = scalar_functional(lambda x, y: -x * y, lambda x, y: x * y)
    z = CurvePair.from_function(lambda t: (np.array([1.0]), np.array([t])), [0.0, 2.0], R1, R1)
    res = upsilon_refined(z, f, 0.0, 2.0)
    assert res.value == pytest.approx(2.0)
    wild = CurvePair.from_function(lambda t: (np.array([math.sin(1e4 * t)]), np.array([t])),
                                   [0.0, 1.0], R1, R1)
    g = scalar_functional(lambda x, y: x * y)
    res = upsilon_refined(wild, g, 0.0, 1.0, tol=1e-6)
    assert not res.converged
    with pytest.raises(OutOfDomainError):
        upsilon_refined(z, f, 0.0, 3.0)
