import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqselect import bench
from eqselect.errors import DomainError

# frozen from hand-derived closed forms (s = sqrt(1 + 2 eps^2))
BETA_LINEAR_UNSTABLE_EPS01 = 1.9853674037808489
BETA_LQ_EPS01 = 1.004975246918104


def test_frozen_closed_form_values():
    assert bench.closed_form("linear_unstable", 0.1, 1.0).beta == pytest.approx(BETA_LINEAR_UNSTABLE_EPS01,
                                                                                 rel=1e-14)
    assert bench.closed_form("linear_quadratic", 0.1, 1.0).beta == pytest.approx(BETA_LQ_EPS01, rel=1e-14)


def _scalar_riccati_oracle(a, eps, nu, ell2, ell1, ell0):
    """Closed form for m = a x and penalty ell2 x^2 + ell1 x + ell0 from a quadratic ansatz.

    V = p x^2 / 2 + q x; matching powers of x in the HJB fixes p, q and beta.
    The closed loop is dX = (r X - eps^2 q) dt + eps^nu dW.
    """
    # x^2: a p - eps^2 p^2 / 2 + ell2 = 0, with closed-loop rate a - eps^2 p < 0
    p = (a + math.sqrt(a * a + 2 * eps ** 2 * ell2)) / eps ** 2
    r = a - eps ** 2 * p
    # x^1: a q - eps^2 p q + ell1 = 0
    q = -ell1 / r
    beta = 0.5 * eps ** (2 * nu) * p - 0.5 * eps ** 2 * q * q + ell0
    var = eps ** (2 * nu) / (-2 * r)
    mean = eps ** 2 * q / r
    effort = 0.5 * eps ** 2 * (p * p * var + (p * mean + q) ** 2)
    return beta, mean, var, effort, r


@pytest.mark.parametrize("name,a,pen", [
    ("linear_unstable", 1.0, (1.0, 2.0, 1.0)),
    ("linear_stable", -1.0, (1.0, 2.0, 1.0)),
    ("linear_quadratic", 1.0, (1.0, 0.0, 0.0)),
])
@pytest.mark.parametrize("eps,nu", [(0.05, 1.0), (0.1, 0.5), (0.2, 1.5), (0.3, 2.0)])
def test_closed_forms_against_quadratic_ansatz(name, a, pen, eps, nu):
    cf = bench.closed_form(name, eps, nu)
    beta, mean, var, effort, r = _scalar_riccati_oracle(a, eps, nu, *pen)
    assert cf.beta == pytest.approx(beta, rel=1e-12)
    assert cf.mean == pytest.approx(mean, rel=1e-12, abs=1e-15)
    assert cf.variance == pytest.approx(var, rel=1e-12)
    assert cf.effort == pytest.approx(effort, rel=1e-10)
    assert cf.closed_loop_rate == pytest.approx(r, rel=1e-12)


def test_closed_form_errors():
    with pytest.raises(DomainError):
        bench.closed_form("double_well_1", 0.1, 1.0)
    with pytest.raises(DomainError):
        bench.closed_form("linear_unstable", 0.0, 0.5)
    assert bench.closed_form("linear_unstable", 0.0, 1.0).beta == pytest.approx(2.0)


def test_catalog_and_params():
    assert set(bench.PROBLEM_NAMES) == {"double_well_1", "double_well_2", "linear_unstable",
                                        "linear_stable", "linear_quadratic"}
    p = bench.get_problem("double_well_1", c=2.0)
    assert p.system.ell1(np.array([1.0]))[0] == pytest.approx(2.0)
    with pytest.raises(DomainError):
        bench.get_problem("nope")
    with pytest.raises(DomainError):
        bench.get_problem("double_well_1", d=1.0)
    with pytest.raises(DomainError):
        bench.get_problem("double_well_1", c=-1.0)
    with pytest.raises(DomainError):
        bench.get_problem("linear_quadratic", M=0.0)


def test_dw2_potential_matches_drift():
    p = bench.get_problem("double_well_2")
    F = np.polynomial.Polynomial([0, 0, 3, 1 / 3, -7 / 4, -1 / 5, 1 / 6])
    x = np.linspace(-2.5, 3.5, 13)
    assert np.allclose(p.system.m1(x), -F.deriv()(x), atol=1e-10)


def test_taper_points_inward_without_new_zeros():
    p = bench.get_problem("double_well_1")
    x = np.linspace(3, 40, 2000)
    assert np.all(p.system.m1(x) < 0) and np.all(p.system.m1(-x - 0.5) > 0)
    # constant beyond the blend
    assert p.system.m1(np.array([13.0, 30.0])) == pytest.approx([p.drift_poly(10.0)] * 2)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(9.0, 13.0))
def test_taper_derivative_consistent(x):
    s = bench.get_problem("double_well_2").system
    h = 1e-5
    fd = (s.m1(np.array([x + h]))[0] - s.m1(np.array([x - h]))[0]) / (2 * h)
    assert s.dm1(np.array([x]))[0] == pytest.approx(fd, rel=1e-5, abs=1e-3)


def test_polynomial_system_taper_requires_inward():
    with pytest.raises(DomainError):
        bench.polynomial_system([0.0, 1.0], [0.0, 0.0, 1.0], (-1.0, 1.0), taper=True)
