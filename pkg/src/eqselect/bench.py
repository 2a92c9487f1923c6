"""Built-in benchmark systems and their closed-form oracle values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from .dynamics import VectorFieldSystem
from .errors import DomainError

TAPER_START = 10.0
TAPER_WIDTH = 2.0


def _smoothstep5(t):
    # quintic ramp, zero first and second derivative at both ends
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t ** 2), 30 * t ** 2 * (1 - t) ** 2


def tapered_drift(poly: Polynomial, start: float = TAPER_START, width: float = TAPER_WIDTH):
    """Blend a polynomial drift into a constant inward drift on ``start <= |x| <= start + width``.

    The constant is ``|m(+-start)|`` pointing inward, so provided the polynomial
    already points inward at ``+-start`` no new zeros appear. Returns ``(m, dm)``.
    """
    dpoly = poly.deriv()
    c_hi, c_lo = poly(start), poly(-start)
    if c_hi >= 0 or c_lo <= 0:
        raise DomainError("drift must point inward at the taper start")

    def m(x):
        x = np.asarray(x, dtype=float)
        base = poly(x)
        S, _ = _smoothstep5((np.abs(x) - start) / width)
        target = np.where(x > 0, c_hi, c_lo)
        return (1 - S) * base + S * target

    def dm(x):
        x = np.asarray(x, dtype=float)
        S, dS = _smoothstep5((np.abs(x) - start) / width)
        target = np.where(x > 0, c_hi, c_lo)
        return (1 - S) * dpoly(x) + dS * np.sign(x) / width * (target - poly(x))

    return m, dm


def polynomial_system(drift_coeffs, penalty_coeffs, box, name: str = "polynomial",
                      taper: bool = False, params: dict | None = None) -> VectorFieldSystem:
    """Scalar system with polynomial drift and penalty (coefficients lowest degree first)."""
    pm = Polynomial(np.asarray(drift_coeffs, dtype=float))
    pl = Polynomial(np.asarray(penalty_coeffs, dtype=float))
    if taper:
        m, dm = tapered_drift(pm)
    else:
        m, dm = pm, pm.deriv()
    return VectorFieldSystem.from_1d(m, pl, box, dm=dm, dell=pl.deriv(), name=name, params=params)


@dataclass(frozen=True)
class ClosedForm:
    beta: float
    mean: float
    variance: float
    effort: float
    closed_loop_rate: float

    @property
    def mean_penalty(self) -> float:
        return self.beta - self.effort


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    system: VectorFieldSystem
    known_equilibria: tuple[tuple[float, str], ...]
    drift_poly: Polynomial
    penalty_poly: Polynomial
    params: dict = field(default_factory=dict)
    notes: str = ""

    @property
    def has_closed_form(self) -> bool:
        return self.name in _CLOSED

    def closed_form(self, epsilon: float, nu: float) -> ClosedForm:
        return closed_form(self.name, epsilon, nu, **self.params)

    def polynomial_roots(self) -> np.ndarray:
        """Real roots of the drift polynomial via the companion matrix."""
        r = self.drift_poly.roots()
        return np.sort(r[np.abs(r.imag) < 1e-9].real)


def _dw1(c: float = 5.0):
    if not c > 0:
        raise DomainError("c must be positive")
    # F = x^4/4 - x^3/3 - x^2, m = -F'
    pm = Polynomial([0.0, 2.0, 1.0, -1.0])
    pl = Polynomial([0.0, 0.0, c])
    eqs = ((-1.0, "stable"), (0.0, "unstable"), (2.0, "stable"))
    return pm, pl, (-3.0, 4.0), eqs, True, "F = x^4/4 - x^3/3 - x^2, penalty c x^2"


def _dw2():
    # F' = x(x-1)(x+1)(x+2)(x-3)
    Fp = Polynomial.fromroots([0.0, 1.0, -1.0, -2.0, 3.0])
    pl = Polynomial([16.0, 0.0, -20.0, -1.0, 5.0])
    eqs = ((-2.0, "stable"), (-1.0, "unstable"), (0.0, "stable"), (1.0, "unstable"), (3.0, "stable"))
    return -Fp, pl, (-3.0, 4.0), eqs, True, "F = x^6/6 - x^5/5 - 7x^4/4 + x^3/3 + 3x^2"


def _lin(sign: float):
    pm = Polynomial([0.0, sign])
    pl = Polynomial([1.0, 2.0, 1.0])
    eqs = ((0.0, "unstable" if sign > 0 else "stable"),)
    return pm, pl, (-6.0, 6.0), eqs, False, "linear drift, penalty (x + 1)^2"


def _lq(M: float = 1.0, L: float = 2.0):
    if M == 0:
        raise DomainError("M must be nonzero (hyperbolic)")
    if L < 0:
        raise DomainError("L must be non-negative")
    pm = Polynomial([0.0, M])
    pl = Polynomial([0.0, 0.0, 0.5 * L])
    eqs = ((0.0, "unstable" if M > 0 else "stable"),)
    return pm, pl, (-6.0, 6.0), eqs, False, "m = M x, penalty L x^2 / 2"


_CATALOG = {
    "double_well_1": _dw1,
    "double_well_2": _dw2,
    "linear_unstable": lambda: _lin(1.0),
    "linear_stable": lambda: _lin(-1.0),
    "linear_quadratic": _lq,
}

PROBLEM_NAMES = tuple(_CATALOG)


def get_problem(name: str, **params) -> BenchmarkProblem:
    """Look up a catalog problem; ``double_well_1`` takes ``c``, ``linear_quadratic`` takes ``M``, ``L``."""
    if name not in _CATALOG:
        raise DomainError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")
    try:
        pm, pl, box, eqs, taper, notes = _CATALOG[name](**params)
    except TypeError as exc:
        raise DomainError(f"bad parameters for {name}: {exc}") from exc
    if taper:
        m, dm = tapered_drift(pm)
    else:
        m, dm = pm, pm.deriv()
    sys = VectorFieldSystem.from_1d(m, pl, box, dm=dm, dell=pl.deriv(), name=name, params=dict(params))
    return BenchmarkProblem(name=name, system=sys, known_equilibria=eqs, drift_poly=pm,
                            penalty_poly=pl, params=dict(params), notes=notes)


# closed forms for the linear problems

def _cf_linear(epsilon, nu, unstable: bool) -> ClosedForm:
    e2 = epsilon ** 2
    s = math.sqrt(1 + 2 * e2)
    scale = epsilon ** (2 * nu - 2)
    mean = -2 * e2 / (1 + 2 * e2)
    var = epsilon ** (2 * nu) / (2 * s)
    tail = 2 * e2 / (1 + 2 * e2) ** 2
    if unstable:
        beta = 1 / (1 + 2 * e2) + scale * (1 + s) / 2
        effort = scale * (1 + s) ** 2 / (4 * s) + tail
    else:
        beta = 1 / (1 + 2 * e2) + scale * (s - 1) / 2
        # (s - 1)^2 = 4 eps^4 / (1 + s)^2
        effort = epsilon ** (2 * nu + 2) / ((1 + s) ** 2 * s) + tail
    return ClosedForm(beta=beta, mean=mean, variance=var, effort=effort, closed_loop_rate=-s)


def _cf_lq(epsilon, nu, M=1.0, L=2.0) -> ClosedForm:
    r = math.sqrt(M * M + L * epsilon ** 2)
    beta = 0.5 * epsilon ** (2 * nu - 2) * (M + r)
    var = epsilon ** (2 * nu) / (2 * r)
    return ClosedForm(beta=beta, mean=0.0, variance=var, effort=beta - 0.5 * L * var, closed_loop_rate=-r)


_CLOSED = {
    "linear_unstable": lambda e, n: _cf_linear(e, n, True),
    "linear_stable": lambda e, n: _cf_linear(e, n, False),
    "linear_quadratic": _cf_lq,
}


def closed_form(name: str, epsilon: float, nu: float, **params) -> ClosedForm:
    """Exact optimal value, stationary moments and effort for the linear problems."""
    if name not in _CLOSED:
        raise DomainError(f"no closed form for {name!r}")
    if not (epsilon >= 0 and nu > 0):
        raise DomainError("need epsilon >= 0 and nu > 0")
    if epsilon == 0 and nu < 1:
        raise DomainError("epsilon = 0 limit diverges for nu < 1")
    if name == "linear_quadratic":
        return _cf_lq(epsilon, nu, **params)
    return _CLOSED[name](epsilon, nu)
