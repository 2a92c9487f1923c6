"""Vector-field analysis: equilibria, selection sets and local energy forms."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import matctrl
from .errors import DomainError, NumericFailure

Array = np.ndarray


def _as_points(x, dim: int) -> tuple[Array, bool]:
    """Coerce ``x`` to shape ``(n, dim)``; flag whether a single point was given."""
    a = np.asarray(x, dtype=float)
    if dim == 1 and a.ndim <= 1:
        single = a.ndim == 0
        return a.reshape(-1, 1), single
    if a.ndim == 1:
        return a.reshape(1, dim), True
    return a.reshape(-1, dim), False


@dataclass(frozen=True)
class VectorFieldSystem:
    """Drift ``m``, penalty ``l`` and their derivatives on an axis-aligned box.

    Callables act on point arrays of shape ``(n, dim)``: ``drift`` returns
    ``(n, dim)``, ``penalty`` returns ``(n,)``, ``drift_jacobian`` returns
    ``(n, dim, dim)`` and ``penalty_gradient`` returns ``(n, dim)``. They must
    be re-entrant; nothing here mutates them. Missing derivatives fall back to
    central differences.
    """

    dim: int
    drift: Callable[[Array], Array]
    penalty: Callable[[Array], Array]
    box: tuple[Array, Array]
    drift_jacobian: Callable[[Array], Array] | None = None
    penalty_gradient: Callable[[Array], Array] | None = None
    name: str = "system"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.box[0], dtype=float))
        hi = np.atleast_1d(np.asarray(self.box[1], dtype=float))
        if lo.shape != (self.dim,) or hi.shape != (self.dim,) or np.any(lo >= hi):
            raise DomainError(f"invalid box {self.box} for dim {self.dim}")
        object.__setattr__(self, "box", (lo, hi))

    @classmethod
    def from_1d(cls, m, ell, box, dm=None, dell=None, name="system", params=None):
        """Build a scalar system from vectorised functions of a 1-D array."""
        drift = lambda x: np.asarray(m(x[:, 0]), dtype=float).reshape(-1, 1)
        pen = lambda x: np.asarray(ell(x[:, 0]), dtype=float).reshape(-1)
        jac = None if dm is None else (lambda x: np.asarray(dm(x[:, 0]), dtype=float).reshape(-1, 1, 1))
        grad = None if dell is None else (lambda x: np.asarray(dell(x[:, 0]), dtype=float).reshape(-1, 1))
        return cls(1, drift, pen, (np.atleast_1d(box[0]), np.atleast_1d(box[1])),
                   jac, grad, name, dict(params or {}))

    # point-wise evaluation accepting a single point or a batch

    def m(self, x) -> Array:
        pts, single = _as_points(x, self.dim)
        out = np.asarray(self.drift(pts), dtype=float).reshape(-1, self.dim)
        return out[0] if single else out

    def ell(self, x) -> Array:
        pts, single = _as_points(x, self.dim)
        out = np.asarray(self.penalty(pts), dtype=float).reshape(-1)
        return out[0] if single else out

    def jacobian(self, x, step: float = 1e-6) -> Array:
        pts, single = _as_points(x, self.dim)
        if self.drift_jacobian is not None:
            J = np.asarray(self.drift_jacobian(pts), dtype=float).reshape(-1, self.dim, self.dim)
        else:
            J = self._fd_jacobian(pts, step)
        return J[0] if single else J

    def grad_ell(self, x, step: float = 1e-6) -> Array:
        pts, single = _as_points(x, self.dim)
        if self.penalty_gradient is not None:
            g = np.asarray(self.penalty_gradient(pts), dtype=float).reshape(-1, self.dim)
        else:
            g = np.empty_like(pts)
            for j in range(self.dim):
                e = np.zeros(self.dim)
                e[j] = step * (1 + np.abs(pts[:, j])).max()
                g[:, j] = (self.ell(pts + e) - self.ell(pts - e)) / (2 * e[j])
        return g[0] if single else g

    def _fd_jacobian(self, pts: Array, step: float) -> Array:
        n = pts.shape[0]
        J = np.empty((n, self.dim, self.dim))
        for j in range(self.dim):
            hj = step * max(1.0, float(np.abs(pts[:, j]).max()))
            e = np.zeros(self.dim)
            e[j] = hj
            J[:, :, j] = (self.m(pts + e).reshape(n, -1) - self.m(pts - e).reshape(n, -1)) / (2 * hj)
        return J

    # 1-D conveniences used by the grid solver and the simulator

    def m1(self, x) -> Array:
        return self.m(np.asarray(x, dtype=float).reshape(-1, 1))[:, 0]

    def ell1(self, x) -> Array:
        return self.ell(np.asarray(x, dtype=float).reshape(-1, 1))

    def dm1(self, x) -> Array:
        return self.jacobian(np.asarray(x, dtype=float).reshape(-1, 1))[:, 0, 0]

    def check(self, n_probe: int = 64, seed: int = 0) -> list[str]:
        """Probe the documented invariants; returns warning messages."""
        rng = np.random.default_rng(seed)
        lo, hi = self.box
        pts = lo + (hi - lo) * rng.random((n_probe, self.dim))
        msgs = []
        mv, lv = self.m(pts), self.ell(pts)
        if not (np.all(np.isfinite(mv)) and np.all(np.isfinite(lv))):
            msgs.append("drift or penalty not finite on box")
        if np.any(lv < 0):
            msgs.append(f"penalty negative on box (min sampled {lv.min():.4g})")
        if self.drift_jacobian is not None:
            Ja = self.jacobian(pts)
            Jf = self._fd_jacobian(pts, 1e-6)
            scale = np.maximum(1.0, np.abs(Jf))
            if np.max(np.abs(Ja - Jf) / scale) > 1e-5:
                msgs.append("analytic Jacobian disagrees with central differences")
        return msgs

    def boundary_lyapunov_check(self, n: int = 64) -> list[str]:
        """Spot-check that the drift points inward on the box boundary.

        Uses ``|x|^2`` as trial Lyapunov function; the global Lyapunov
        hypothesis stays the user's responsibility.
        """
        lo, hi = self.box
        c = 0.5 * (lo + hi)
        msgs = []
        rng = np.random.default_rng(1)
        for j, side in itertools.product(range(self.dim), (0, 1)):
            pts = lo + (hi - lo) * rng.random((n, self.dim))
            pts[:, j] = (lo, hi)[side][j]
            val = np.sum(self.m(pts) * (pts - c), axis=1)
            if np.any(val >= 0):
                msgs.append(f"drift not inward on face {j}/{'lo' if side == 0 else 'hi'}")
        for msg in msgs:
            warnings.warn(msg, stacklevel=2)
        return msgs


@dataclass(frozen=True)
class Equilibrium:
    z: Array
    jacobian: Array
    classification: str
    index: int
    penalty_at: float
    unstable_trace: float

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    @property
    def is_stable(self) -> bool:
        return self.index == 0

    def key(self) -> tuple:
        return tuple(np.round(self.z, 12))

    def __repr__(self) -> str:
        pt = self.z[0] if self.dim == 1 else tuple(self.z)
        return (f"Equilibrium(z={pt:.6g}, {self.classification}, index={self.index}, "
                f"l={self.penalty_at:.6g}, L+={self.unstable_trace:.6g})"
                if self.dim == 1 else
                f"Equilibrium(z={pt}, {self.classification}, index={self.index}, "
                f"l={self.penalty_at:.6g}, L+={self.unstable_trace:.6g})")


def classify_equilibrium(sys: VectorFieldSystem, z, axis_tol: float = matctrl.AXIS_TOL,
                         residual_tol: float = 1e-8) -> Equilibrium:
    z = np.atleast_1d(np.asarray(z, dtype=float)).reshape(sys.dim)
    res = float(np.linalg.norm(sys.m(z)))
    if res > residual_tol:
        raise DomainError(f"|m(z)| = {res:.3g} exceeds {residual_tol:g}; not an equilibrium")
    J = np.asarray(sys.jacobian(z), dtype=float).reshape(sys.dim, sys.dim)
    spec = matctrl.spectral_summary(J, axis_tol)
    if not spec.is_dichotomous:
        raise DomainError(f"equilibrium at {z} is not hyperbolic")
    idx = spec.index
    cls = "stable" if idx == 0 else ("unstable" if idx == sys.dim else "saddle")
    return Equilibrium(z=z, jacobian=J, classification=cls, index=idx,
                       penalty_at=float(np.ravel(sys.ell(z))[0]), unstable_trace=spec.unstable_trace)


def _newton(sys: VectorFieldSystem, x0: Array, tol: float = 1e-12, max_iter: int = 60):
    lo, hi = sys.box
    span = hi - lo
    x = x0.copy()
    r = sys.m(x)
    nr = float(np.linalg.norm(r))
    for _ in range(max_iter):
        J = sys.jacobian(x)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return x, nr, False
        # small residual alone is not enough near degenerate roots
        if nr <= tol and np.linalg.norm(dx) <= 1e-9 * (1 + np.linalg.norm(x)):
            return x, nr, True
        t = 1.0
        for _ in range(30):
            xn = x + t * dx
            rn = sys.m(xn)
            if float(np.linalg.norm(rn)) < (1 - 1e-4 * t) * nr or nr < 1e-9:
                break
            t *= 0.5
        x, r = xn, rn
        nr = float(np.linalg.norm(r))
        if np.any(x < lo - span) or np.any(x > hi + span):
            return x, nr, False
    return x, nr, False


def _seeds(sys: VectorFieldSystem, grid_density: int) -> Array:
    lo, hi = sys.box
    axes = [np.linspace(lo[j], hi[j], grid_density) for j in range(sys.dim)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = mesh.shape[:-1]
    pts = mesh.reshape(-1, sys.dim)
    mv = sys.m(pts).reshape(*shape, sys.dim)
    norm = np.linalg.norm(mv, axis=-1)
    seeds = []
    if sys.dim == 1:
        f = mv[:, 0]
        s = np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) <= 0)[0]
        seeds.extend([[v] for v in 0.5 * (axes[0][s] + axes[0][s + 1])])
    # local minima of |m| over the grid neighbourhood
    padded = np.pad(norm, 1, mode="constant", constant_values=np.inf)
    is_min = np.ones(shape, dtype=bool)
    for off in itertools.product((-1, 0, 1), repeat=sys.dim):
        if not any(off):
            continue
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shape))
        is_min &= norm <= padded[sl]
    seeds.extend(pts[is_min.reshape(-1)].reshape(-1, sys.dim).tolist())
    return np.asarray(seeds, dtype=float).reshape(-1, sys.dim)


def find_equilibria(sys: VectorFieldSystem, grid_density: int = 64,
                    axis_tol: float = matctrl.AXIS_TOL, merge_tol: float = 1e-6) -> list[Equilibrium]:
    """Locate hyperbolic critical points in the box by seeded Newton iteration.

    Non-converging seeds and non-hyperbolic candidates raise warnings and are
    dropped; the result is sorted lexicographically.
    """
    if grid_density < 8:
        raise DomainError("grid_density must be at least 8 per axis")
    lo, hi = sys.box
    found: list[Array] = []
    failures = 0
    for s in _seeds(sys, grid_density):
        x, nr, ok = _newton(sys, s)
        if not ok:
            failures += 1
            continue
        if np.any(x < lo) or np.any(x > hi):
            continue
        x = np.where(np.abs(x) < 1e-14, 0.0, x)
        if all(np.linalg.norm(x - y) > merge_tol for y in found):
            found.append(x)
    if failures:
        warnings.warn(f"Newton failed from {failures} seed(s)", RuntimeWarning, stacklevel=2)
    out = []
    for z in found:
        try:
            out.append(classify_equilibrium(sys, z, axis_tol, residual_tol=1e-10))
        except DomainError as exc:
            warnings.warn(f"excluded candidate {z}: {exc}", RuntimeWarning, stacklevel=2)
    out.sort(key=lambda e: tuple(e.z))
    return out


# selection sets

SUPERCRITICAL, CRITICAL, SUBCRITICAL = "supercritical", "critical", "subcritical"


@dataclass(frozen=True)
class RegimeReport:
    nu: float
    regime: str
    Z_set: tuple
    Zs_set: tuple
    Zc_set: tuple
    Ztilde_set: tuple
    J: float
    Js: float
    Jc: float
    Jtilde: float
    predicted_S: tuple
    beta_limit: float
    beta_bounds: str
    effort_order: str

    def as_dict(self) -> dict:
        pts = lambda s: [e.z.tolist() if e.dim > 1 else float(e.z[0]) for e in s]
        return {
            "nu": self.nu, "regime": self.regime,
            "Z": pts(self.Z_set), "Zs": pts(self.Zs_set), "Zc": pts(self.Zc_set),
            "Ztilde": pts(self.Ztilde_set),
            "J": self.J, "Js": self.Js, "Jc": self.Jc, "Jtilde": self.Jtilde,
            "predicted_S": pts(self.predicted_S), "beta_limit": self.beta_limit,
            "beta_bounds": self.beta_bounds, "effort_order": self.effort_order,
        }


def _argmin(items: Sequence[Equilibrium], key, rtol: float):
    vals = [key(e) for e in items]
    best = min(vals)
    tol = rtol * (1.0 + abs(best))
    return best, tuple(e for e, v in zip(items, vals) if v <= best + tol)


def regime_report(equilibria: Sequence[Equilibrium], nu: float, tie_rtol: float = 1e-9) -> RegimeReport:
    """Selection sets and the predicted stochastically stable set for ``nu``.

    Ties are kept as sets. ``beta_limit`` is the small-noise limit of the
    optimal value in the regime selected by ``nu``.
    """
    eqs = list(equilibria)
    if not eqs:
        raise DomainError("empty equilibrium list")
    if not nu > 0:
        raise DomainError("nu must be positive")
    stable = [e for e in eqs if e.is_stable]
    J, Z = _argmin(eqs, lambda e: e.penalty_at, tie_rtol)
    Jt, Zt = _argmin(Z, lambda e: e.unstable_trace, tie_rtol)
    Jc, Zc = _argmin(eqs, lambda e: e.penalty_at + e.unstable_trace, tie_rtol)
    if stable:
        Js, Zs = _argmin(stable, lambda e: e.penalty_at, tie_rtol)
    else:
        Js, Zs = math.inf, ()
    if nu > 1:
        regime, S, beta = SUPERCRITICAL, Zt, J
        if Js <= J * (1 + tie_rtol) + tie_rtol:
            bounds = "O(eps^(2 ^ nu)) <= beta - J <= O(eps^(2 nu))"
            effort = "O(eps^(nu ^ 2))"
        else:
            bounds = "O(eps^(2 ^ nu)) <= beta - J <= eps^(2 nu - 2) Jtilde + O(eps^(2 nu))"
            effort = "O(eps^((2 nu - 2) ^ 2))"
    elif nu < 1:
        # without stable points the value diverges like eps^(2 nu - 2)
        regime, S, beta = SUBCRITICAL, Zs, Js
        bounds = "O(eps^nu) <= beta - Js <= O(eps^(nu v (4 nu - 2)))"
        effort = "O(eps^nu)"
    else:
        regime, S, beta = CRITICAL, Zc, Jc
        bounds = "beta <= Jc + O(eps^2); beta -> Jc"
        if Js <= Jc * (1 + tie_rtol) + tie_rtol:
            bounds += "; O(eps^nu) <= beta - Js"
        effort = "O(1)"
    return RegimeReport(nu=float(nu), regime=regime, Z_set=Z, Zs_set=Zs, Zc_set=Zc, Ztilde_set=Zt,
                        J=float(J), Js=float(Js), Jc=float(Jc), Jtilde=float(Jt), predicted_S=S,
                        beta_limit=float(beta), beta_bounds=bounds, effort_order=effort)


# local energy functions

@dataclass(frozen=True)
class DescentReport:
    radius: float
    samples: int
    min_value: float
    max_value: float
    violations: int
    c0: float
    linear_band_ok: bool
    remainder_ratio: float = 0.0

    @property
    def ok(self) -> bool:
        return self.violations == 0


@dataclass(frozen=True)
class LocalEnergyForm:
    """Quadratic energy ``a + (x - z)^T P (x - z)`` near one equilibrium.

    ``P = T^T diag(Q1, -theta Q2) T`` where ``T`` splits the Jacobian into a
    stable block ``M1`` and an unstable block ``-M2`` and the ``Q`` blocks solve
    ``Mi^T Qi + Qi Mi = -I``.
    """

    center: Equilibrium
    T: Array
    Qtilde1: Array
    Qtilde2: Array
    theta: float | None
    level: float
    quadratic_form: Array
    laplacian_at_center: float
    lyapunov_residuals: tuple[float, float]
    descent: DescentReport | None = None

    def value(self, x) -> Array:
        y = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.center.dim)) - self.center.z
        return self.level + np.einsum("ni,ij,nj->n", y, self.quadratic_form, y)

    def gradient(self, x) -> Array:
        y = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.center.dim)) - self.center.z
        return 2.0 * y @ self.quadratic_form.T


def local_energy_form(eq: Equilibrium, theta_margin: float = 0.1, level: float = 0.0,
                      sys: VectorFieldSystem | None = None, others: Sequence[Equilibrium] = (),
                      r_loc: float | None = None, samples: int = 200, seed: int = 0) -> LocalEnergyForm:
    """Build the local quadratic energy around ``eq``.

    ``level`` is the value ``a_z`` and is a caller input; ordering levels along
    connecting orbits is not attempted. When ``sys`` is given the descent
    inequality is sampled in the punctured ball of radius ``r_loc``, which
    defaults to 0.2 times the distance to the nearest other equilibrium.
    """
    if theta_margin <= 0:
        raise DomainError("theta_margin must be positive")
    M = eq.jacobian
    d = M.shape[0]
    T, M1, M2 = matctrl.stable_unstable_split(M)
    k = M1.shape[0]
    Q1 = matctrl.solve_lyapunov(M1.T, np.eye(k)) if k else np.zeros((0, 0))
    Q2 = matctrl.solve_lyapunov(M2.T, np.eye(d - k)) if d - k else np.zeros((0, 0))
    res1 = matctrl.lyapunov_residual(M1.T, Q1, np.eye(k)) if k else 0.0
    res2 = matctrl.lyapunov_residual(M2.T, Q2, np.eye(d - k)) if d - k else 0.0
    B1 = np.zeros((d, d))
    B1[:k, :k] = Q1
    B2 = np.zeros((d, d))
    B2[k:, k:] = Q2
    tr1 = float(np.trace(T.T @ B1 @ T))
    tr2 = float(np.trace(T.T @ B2 @ T))
    if d - k == 0:
        theta = None
        P = T.T @ B1 @ T
    else:
        theta = (1.0 + theta_margin) * max(1.0, tr1 / tr2)
        P = T.T @ (B1 - theta * B2) @ T
    P = 0.5 * (P + P.T)
    form = LocalEnergyForm(center=eq, T=T, Qtilde1=Q1, Qtilde2=Q2, theta=theta, level=level,
                           quadratic_form=P, laplacian_at_center=2.0 * float(np.trace(P)),
                           lyapunov_residuals=(res1, res2))
    if sys is None:
        return form
    if r_loc is None:
        gaps = [float(np.linalg.norm(o.z - eq.z)) for o in others if np.linalg.norm(o.z - eq.z) > 0]
        r_loc = 0.2 * min(gaps) if gaps else 0.1
    rep = descent_check(sys, form, r_loc, samples, seed)
    return LocalEnergyForm(**{**form.__dict__, "descent": rep})


def descent_check(sys: VectorFieldSystem, form: LocalEnergyForm, radius: float,
                  samples: int = 200, seed: int = 0) -> DescentReport:
    """Sample ``<m, grad w>`` in the punctured ball around the form's center.

    Reports extremes, the number of non-negative values, the largest
    constant ``C0`` with ``C0 (r v |grad w|)^2 <= |<m, grad w>| <= (r ^ |grad w|)^2 / C0``
    (``r = |x - z|``), and whether ``-theta |T y|^2 <= <m, grad w> <= -|T y|^2``
    holds for the linearised field. ``remainder_ratio`` is the largest
    ``|<m(x) - M y, grad w>| / |T y|^2``, which is O(radius).
    """
    eq = form.center
    d = eq.dim
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(samples) ** (1.0 / d)
    r = np.maximum(r, 1e-3 * radius)
    y = u * r[:, None]
    x = eq.z + y
    g = form.gradient(x)
    val = np.sum(sys.m(x).reshape(-1, d) * g, axis=1)
    gn = np.linalg.norm(g, axis=1)
    hi = np.maximum(r, gn) ** 2
    lo = np.minimum(r, gn) ** 2
    absval = np.abs(val)
    with np.errstate(divide="ignore", invalid="ignore"):
        c0 = float(np.min(np.minimum(absval / hi, lo / absval)))
    Ty2 = np.sum((y @ form.T.T) ** 2, axis=1)
    theta = form.theta if form.theta is not None else 1.0
    # the band holds exactly for the linear part; the rest is the remainder
    lin = np.sum((y @ eq.jacobian.T) * g, axis=1)
    tol = 1e-9 * (1.0 + theta) * Ty2
    band = bool(np.all(lin >= -theta * Ty2 - tol) and np.all(lin <= -Ty2 + tol))
    remainder = float(np.max(np.abs(val - lin) / Ty2))
    return DescentReport(radius=float(radius), samples=int(samples), min_value=float(val.min()),
                         max_value=float(val.max()), violations=int(np.sum(val >= 0)),
                         c0=c0 if np.isfinite(c0) else 0.0, linear_band_ok=band,
                         remainder_ratio=remainder)
