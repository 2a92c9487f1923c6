"""Ergodic HJB solver on a 1-D grid.

With ``psi = exp(-k V)``, ``k = eps^(2 - 2 nu)``, the ergodic HJB

    (eps^(2 nu) / 2) V'' + m V' - (eps^2 / 2) V'^2 + l = beta

becomes the linear eigenproblem ``-(a/2) psi'' - b m psi' + l psi = beta psi``
with ``a = eps^(4 nu - 2)`` and ``b = eps^(2 nu - 2)``. The operator is
discretised as a tridiagonal matrix with Dirichlet ends. It is diagonally
similar to a symmetric matrix, so the principal pair is found with a
symmetric tridiagonal eigenvalue solve followed by shifted inverse
iteration through a twisted factorisation, carried out entirely in
log space. ``psi`` spans hundreds of orders of magnitude for ``nu`` far from
1, so it is never formed explicitly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import logsumexp

from .dynamics import VectorFieldSystem, find_equilibria
from .errors import BoxTooSmallError, DomainError, NumericFailure

SCHEMES = ("auto", "central", "upwind", "fitted")
AUTO_SWITCH = 1.0


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DomainError("grid needs lo < hi")
        if self.n < 64:
            raise DomainError("grid needs at least 64 nodes")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    def enlarged(self, factor: float) -> "Grid1D":
        """Box widened by ``factor`` about its centre, keeping the existing nodes."""
        extra = int(round(0.5 * (factor - 1.0) * (self.n - 1)))
        h = self.h
        return Grid1D(self.lo - extra * h, self.hi + extra * h, self.n + 2 * extra)


@dataclass(frozen=True)
class GridPolicy:
    """Chooses the box and node count for a given (eps, nu).

    The box covers all equilibria with margin ``5 eps^(nu ^ 1)`` (at least
    ``min_margin``) and is widened until the penalty at both ends exceeds
    ``beta_hint + margin``. The node count resolves the concentration scale
    ``eps^nu`` with ``cells_per_scale`` cells, bounded by ``[n_min, n_max]``.
    """

    n_min: int = 4001
    n_max: int = 400_001
    cells_per_scale: float = 8.0
    min_margin: float = 1.0
    penalty_margin: float = 1.0
    box: tuple[float, float] | None = None

    def make(self, sys: VectorFieldSystem, epsilon: float, nu: float, equilibria=None) -> Grid1D:
        if self.box is not None:
            lo, hi = self.box
        else:
            eqs = equilibria if equilibria is not None else find_equilibria(sys)
            zs = [float(e.z[0]) for e in eqs] or [0.0]
            margin = max(self.min_margin, 5 * epsilon ** min(nu, 1.0))
            lo, hi = min(zs) - margin, max(zs) + margin
            hint = min((e.penalty_at + epsilon ** (2 * nu - 2) * e.unstable_trace for e in eqs),
                       default=float(np.max(sys.ell1(np.linspace(lo, hi, 64)))))
            target = hint + self.penalty_margin
            step = 0.25 * (hi - lo)
            for _ in range(200):
                if sys.ell1(np.array([lo]))[0] >= target:
                    break
                lo -= step
            for _ in range(200):
                if sys.ell1(np.array([hi]))[0] >= target:
                    break
                hi += step
        n = int(math.ceil((hi - lo) * self.cells_per_scale / epsilon ** nu)) + 1
        n = min(max(n, self.n_min), self.n_max)
        return Grid1D(float(lo), float(hi), n)


@dataclass(frozen=True)
class HjbSolution:
    grid: Grid1D
    epsilon: float
    nu: float
    V: np.ndarray
    beta: float
    log_psi: np.ndarray
    feedback: np.ndarray
    residual_sup: float
    v_shift: float
    scheme: str
    upwind_fraction: float
    iterations: int
    log_density_h: np.ndarray = field(repr=False, default=None)
    dim: int = 1

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def psi(self) -> np.ndarray:
        """Eigenfunction scaled to max 1; underflows to 0 where ``log_psi`` is very negative."""
        return np.exp(self.log_psi - self.log_psi.max())

    @property
    def k(self) -> float:
        return self.epsilon ** (2 - 2 * self.nu)

    def dV(self) -> np.ndarray:
        return np.gradient(self.V, self.grid.h)

    def feedback_at(self, x) -> np.ndarray:
        """Optimal control, interpolated linearly and held constant outside the grid."""
        return np.interp(x, self.grid.x, self.feedback)


def log_bernoulli(t):
    """``log(t / (exp(t) - 1))`` without overflow or cancellation."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    small = np.abs(t) < 1e-6
    pos = (t > 0) & ~small
    neg = (t < 0) & ~small
    out[small] = -0.5 * t[small] + t[small] ** 2 / 24.0
    tp = t[pos]
    out[pos] = np.log(tp) - tp - np.log(-np.expm1(-tp))
    tn = t[neg]
    out[neg] = np.log(-tn) - np.log(-np.expm1(tn))
    return out


def _operator(sys, grid: Grid1D, epsilon: float, nu: float, scheme: str):
    """Interior tridiagonal of the transformed operator.

    Returns ``(diag, log_lower, log_upper, upwind_fraction)``. Off-diagonals
    are negative and stored as ``log(-entry)``, so exponentially small
    couplings do not underflow. ``fitted`` is the exponentially fitted
    (Scharfetter-Gummel) scheme: lower = ``-(D/h^2) B(t)``, upper =
    ``-(D/h^2) B(-t)`` with ``t = v h / D`` and ``B(t) = t / (e^t - 1)``.
    Their ratio is exactly ``e^-t``, which keeps the recovered ``V``
    consistent with the drift potential even where the cell Peclet number
    is large. ``upwind`` is central differencing with first-order upwinding
    at cells with ``|v| h / D >= 2``; the upwind off-diagonal ratio
    ``1 / (1 + |t|)`` is far from ``e^-|t|``, which distorts ``V`` in the far
    field. ``auto`` keeps central differences (more accurate at small
    ``t``) and switches to the fitted form at ``|t| >= 1``.
    """
    if scheme not in SCHEMES:
        raise DomainError(f"scheme must be one of {SCHEMES}")
    x = grid.x[1:-1]
    h = grid.h
    D = 0.5 * epsilon ** (4 * nu - 2)
    v = epsilon ** (2 * nu - 2) * sys.m1(x)
    ell = sys.ell1(x)
    t = v * h / D
    c = D / h ** 2
    at = np.abs(t)
    if scheme == "fitted":
        fit = np.ones(x.shape, dtype=bool)
    elif scheme == "auto":
        fit = at >= AUTO_SWITCH
    else:
        fit = np.zeros(x.shape, dtype=bool)
    up = (at >= 2.0) if scheme == "upwind" else np.zeros(x.shape, dtype=bool)
    # central, then overwrite the fitted / upwinded cells
    upper = -c - v / (2 * h)
    lower = -c + v / (2 * h)
    vp, vm = np.maximum(v, 0.0), np.maximum(-v, 0.0)
    upper = np.where(up, -c - vp / h, upper)
    lower = np.where(up, -c - vm / h, lower)
    if np.any(lower[1:][~fit[1:]] >= 0) or np.any(upper[:-1][~fit[:-1]] >= 0):
        raise NumericFailure("central differences lost monotonicity (cell Peclet >= 2)")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lower = np.log(-lower)
        log_upper = np.log(-upper)
    if fit.any():
        log_lower[fit] = math.log(c) + log_bernoulli(t[fit])
        log_upper[fit] = math.log(c) + log_bernoulli(-t[fit])
    diag = np.exp(log_lower) + np.exp(log_upper) + ell
    frac = float(np.mean(fit | up))
    return diag, log_lower, log_upper, frac


def _pivots_forward(d, p):
    # g_i = d_i - p_i / g_{i-1}, p_i = lower_i * upper_{i-1}
    n = len(d)
    g = [0.0] * n
    prev = d[0]
    g[0] = prev
    for i in range(1, n):
        prev = d[i] - p[i] / prev
        g[i] = prev
    return np.array(g)


def _pivots_backward(d, p):
    n = len(d)
    g = [0.0] * n
    nxt = d[n - 1]
    g[n - 1] = nxt
    for i in range(n - 2, -1, -1):
        nxt = d[i] - p[i + 1] / nxt
        g[i] = nxt
    return np.array(g)


def _twisted_log_vector(log_s, gp, gm, k):
    """log of the positive twisted-factorisation vector with z_k = 1.

    ``log_s`` holds the logs of the symmetric off-diagonal magnitudes.
    """
    n = len(gp)
    logz = np.zeros(n)
    if k > 0:
        # z_i = s_i z_{i+1} / g+_i for i < k
        step = log_s[:k] - np.log(gp[:k])
        logz[:k] = np.cumsum(step[::-1])[::-1]
    if k < n - 1:
        # z_i = s_{i-1} z_{i-1} / g-_i for i > k
        step = log_s[k:] - np.log(gm[k + 1:])
        logz[k + 1:] = np.cumsum(step)
    return logz


def _principal_pair(diag, log_lower, log_upper, rounds: int = 3, rel_shift: float = 1e-10):
    """Smallest eigenvalue and log of the positive eigenvector of a symmetrisable tridiagonal.

    Each round factors ``S - sigma I`` with ``sigma`` slightly below the current
    estimate, so the matrix is a positive definite Stieltjes matrix: all pivots
    are positive and the twisted vector (one inverse-iteration step) is
    entrywise positive. The Rayleigh quotient of that vector is the next
    estimate.
    """
    log_prod = log_lower[1:] + log_upper[:-1]
    if not np.all(np.isfinite(log_prod)):
        raise NumericFailure("zero off-diagonal coupling; operator is not irreducible")
    log_s = 0.5 * log_prod
    s = np.exp(log_s)
    prod = np.exp(log_prod)
    # diagonal similarity delta: (delta_{i+1}/delta_i)^2 = lower_{i+1}/upper_i
    log_delta = np.concatenate(([0.0], np.cumsum(0.5 * (log_lower[1:] - log_upper[:-1]))))
    try:
        beta = float(scipy.linalg.eigh_tridiagonal(diag, -s, eigvals_only=True, select="i",
                                                   select_range=(0, 0), lapack_driver="stebz")[0])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"tridiagonal eigensolver failed: {exc}") from exc
    p = np.concatenate(([0.0], prod)).tolist()
    scale = max(1.0, abs(beta))
    shift = rel_shift * scale
    history = []
    for _ in range(rounds):
        for _attempt in range(40):
            sigma = beta - shift
            dd = diag - sigma
            gp = _pivots_forward(dd.tolist(), p)
            gm = _pivots_backward(dd.tolist(), p)
            if np.all(gp > 0) and np.all(gm > 0):
                break
            shift *= 4.0
        else:
            raise NumericFailure("could not find a shift below the principal eigenvalue")
        gamma = gp + gm - dd
        k = int(np.argmin(gamma))
        logz = _twisted_log_vector(log_s, gp, gm, k)
        if not np.all(np.isfinite(logz)):
            raise NumericFailure("non-finite eigenvector entries")
        # Rayleigh quotient: z^T (S - sigma) z = gamma_k z_k^2 with z_k = 1
        beta_new = sigma + float(gamma[k]) * math.exp(-logsumexp(2 * logz))
        history.append(beta_new)
        converged = abs(beta_new - beta) <= 1e-13 * scale
        beta = beta_new
        if converged:
            break
    if len(history) > 1 and abs(history[-1] - history[-2]) > 1e-8 * scale:
        raise NumericFailure("inverse iteration stagnated")
    logz -= logz.max()
    return beta, logz, log_delta, len(history)


def hjb_residual_profile(V, beta, x, sys, epsilon, nu) -> np.ndarray:
    """Pointwise HJB residual at nodes 2..n-3 using centred differences."""
    h = x[1] - x[0]
    Vp = (V[2:] - V[:-2]) / (2 * h)
    Vpp = (V[2:] - 2 * V[1:-1] + V[:-2]) / h ** 2
    xi = x[1:-1]
    r = 0.5 * epsilon ** (2 * nu) * Vpp + sys.m1(xi) * Vp - 0.5 * epsilon ** 2 * Vp ** 2 + sys.ell1(xi) - beta
    return r[1:-1]


def _bulk_mask(log_density, x, tail):
    # nodes inside the central (1 - tail) probability interval
    rho = np.exp(log_density - np.max(log_density))
    c = cumulative_trapezoid(rho, x, initial=0.0)
    c /= c[-1]
    return ((c >= 0.5 * tail) & (c <= 1 - 0.5 * tail))[2:-2]


def hjb_residual(sol: HjbSolution, sys, nodes: str = "bulk", window=None, tail: float = 1e-3) -> float:
    """Sup of the HJB residual over interior nodes.

    ``nodes="bulk"`` restricts the sup to the central ``1 - tail`` probability
    interval of the stationary law. Far from where the law lives ``kV'``
    grows until the grid no longer resolves ``psi``. There the centred
    residual measures that under-resolution rather than the solver.
    ``nodes="all"`` takes every node from 2 to n-3. ``window=(lo, hi)``
    further restricts to an interval.
    """
    x = sol.grid.x
    r = np.abs(hjb_residual_profile(sol.V, sol.beta, x, sys, sol.epsilon, sol.nu))
    mask = np.ones_like(r, dtype=bool)
    if nodes == "bulk":
        mask &= _bulk_mask(sol.log_density_h, x, tail)
    elif nodes != "all":
        raise DomainError("nodes must be 'bulk' or 'all'")
    if window is not None:
        xi = x[2:-2]
        mask &= (xi >= window[0]) & (xi <= window[1])
    return float(r[mask].max()) if mask.any() else 0.0


def solve_ergodic_hjb(sys: VectorFieldSystem, epsilon: float, nu: float, grid: Grid1D | None = None,
                      scheme: str = "auto", policy: GridPolicy | None = None) -> HjbSolution:
    """Principal eigenpair of the transformed operator, mapped back to ``(beta, V, v*)``."""
    if sys.dim != 1:
        raise DomainError("only 1-D systems are supported")
    if not (0 < epsilon < 1):
        raise DomainError("epsilon must lie in (0, 1)")
    if not nu > 0:
        raise DomainError("nu must be positive")
    if grid is None:
        grid = (policy or GridPolicy()).make(sys, epsilon, nu)
    diag, log_lower, log_upper, upfrac = _operator(sys, grid, epsilon, nu, scheme)
    beta, logz, log_delta, iters = _principal_pair(diag, log_lower, log_upper)
    k = epsilon ** (2 - 2 * nu)
    log_psi_in = log_delta + logz
    x = grid.x
    # Dirichlet ends: extrapolate V linearly so derivatives at the ends stay finite
    Vin = -log_psi_in / k
    V = np.empty(grid.n)
    V[1:-1] = Vin
    V[0] = 2 * Vin[0] - Vin[1]
    V[-1] = 2 * Vin[-1] - Vin[-2]
    shift = float(V.min())
    V = V - shift
    log_psi = np.empty(grid.n)
    log_psi[1:-1] = log_psi_in
    log_psi[0] = -k * (V[0] + shift)
    log_psi[-1] = -k * (V[-1] + shift)
    feedback = -epsilon * np.gradient(V, grid.h)
    # h-transform density of the symmetric problem, second route to the stationary law
    log_rho_h = np.full(grid.n, -np.inf)
    log_rho_h[1:-1] = 2 * logz
    log_rho_h -= logsumexp(log_rho_h) + math.log(grid.h)
    sol = HjbSolution(grid=grid, epsilon=float(epsilon), nu=float(nu), V=V, beta=float(beta),
                      log_psi=log_psi, feedback=feedback, residual_sup=0.0, v_shift=shift,
                      scheme=scheme, upwind_fraction=upfrac, iterations=iters,
                      log_density_h=log_rho_h)
    res = hjb_residual(sol, sys)
    sol = HjbSolution(**{**sol.__dict__, "residual_sup": res})
    _check_box(sol, sys)
    return sol


def _check_box(sol: HjbSolution, sys) -> None:
    g = sol.grid
    ends = sys.ell1(np.array([g.lo, g.hi]))
    if np.any(ends < sol.beta):
        lo, hi = g.lo, g.hi
        w = 0.25 * (hi - lo)
        raise BoxTooSmallError(
            f"penalty at the box ends {ends} is below beta={sol.beta:.6g}",
            suggested=(lo - w if ends[0] < sol.beta else lo, hi + w if ends[1] < sol.beta else hi))
    i = int(np.argmin(sol.V))
    if sys.ell1(sol.grid.x[i:i + 1])[0] > sol.beta * (1 + 1e-6) + 1e-9:
        warnings.warn("V is minimised where l > beta; solution may be inaccurate", RuntimeWarning,
                      stacklevel=3)


@dataclass(frozen=True)
class ClosedLoopDensity1D:
    grid: Grid1D
    log_density: np.ndarray
    normalization: float
    mean: float
    variance: float
    mass_near: dict
    radius: float

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def cdf(self) -> np.ndarray:
        c = cumulative_trapezoid(self.density, self.grid.x, initial=0.0)
        return c / c[-1]

    def expect(self, f) -> float:
        return float(trapezoid(f * self.density, self.grid.x))

    def mass_in(self, a: float, b: float) -> float:
        c = self.cdf()
        x = self.grid.x
        return float(np.interp(b, x, c) - np.interp(a, x, c))


def density_from_drift(x: np.ndarray, drift: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    """Stationary log density of ``dX = b dt + noise dW`` on the grid (zero-flux).

    Returns ``(log_rho, log_normaliser)``; the cumulative integral is formed by
    trapezoid and normalised with max subtraction.
    """
    phi = (2.0 / noise ** 2) * cumulative_trapezoid(drift, x, initial=0.0)
    # trapezoid weights: half at the ends
    w = np.gradient(x)
    w[1:-1] = 0.5 * (x[2:] - x[:-2])
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    logw = np.log(w)
    lz = float(logsumexp(phi + logw))
    return phi - lz, lz


def closed_loop_density(sol: HjbSolution, sys, points=None, radius: float | None = None,
                        feedback: np.ndarray | None = None) -> ClosedLoopDensity1D:
    """Exact stationary density of the closed loop ``b = m + eps v*`` on the solution grid.

    ``points`` are the centres for ``mass_near`` (defaults to the system's
    equilibria) with ball radius ``radius`` (default 0.3 times the smallest gap,
    or 0.3 for a single point). ``feedback`` overrides the stored control,
    e.g. zeros for the uncontrolled density.
    """
    x = sol.grid.x
    u = sol.feedback if feedback is None else np.asarray(feedback, dtype=float)
    b = sys.m1(x) + sol.epsilon * u
    logp, lz = density_from_drift(x, b, sol.epsilon ** sol.nu)
    rho = np.exp(logp)
    mean = float(trapezoid(x * rho, x))
    var = float(trapezoid((x - mean) ** 2 * rho, x))
    if points is None:
        points = [float(e.z[0]) for e in find_equilibria(sys)]
    points = sorted(float(p) for p in points)
    if radius is None:
        gaps = np.diff(points)
        radius = 0.3 * float(gaps.min()) if len(gaps) else 0.3
    c = cumulative_trapezoid(rho, x, initial=0.0)
    c /= c[-1]
    mass = {p: float(np.interp(p + radius, x, c) - np.interp(p - radius, x, c)) for p in points}
    return ClosedLoopDensity1D(grid=sol.grid, log_density=logp, normalization=lz, mean=mean,
                               variance=var, mass_near=mass, radius=float(radius))


def control_effort(sol: HjbSolution, dens: ClosedLoopDensity1D) -> float:
    """Stationary average of ``|v*|^2 / 2`` under the closed-loop density."""
    return dens.expect(0.5 * sol.feedback ** 2)


def mean_penalty(sol: HjbSolution, dens: ClosedLoopDensity1D, sys) -> float:
    return dens.expect(sys.ell1(sol.grid.x))


@dataclass(frozen=True)
class BetaRow:
    epsilon: float
    beta: float
    effort: float
    mean_penalty: float
    residual: float
    mass: dict
    n: int
    error: str | None = None


def beta_curve(sys, nu: float, eps_list, policy: GridPolicy | None = None, scheme: str = "auto",
               radius: float | None = None) -> list[BetaRow]:
    """One solve per epsilon; failures are recorded per row and the sweep continues."""
    eps = list(eps_list)
    if any(a < b for a, b in zip(eps, eps[1:])):
        raise DomainError("eps_list must be sorted descending")
    policy = policy or GridPolicy()
    eqs = find_equilibria(sys)
    pts = [float(e.z[0]) for e in eqs]
    rows = []
    for e in eps:
        try:
            g = policy.make(sys, e, nu, eqs)
            sol = solve_ergodic_hjb(sys, e, nu, g, scheme)
            dens = closed_loop_density(sol, sys, pts, radius)
            rows.append(BetaRow(e, sol.beta, control_effort(sol, dens), mean_penalty(sol, dens, sys),
                                sol.residual_sup, dens.mass_near, g.n))
        except (NumericFailure, DomainError) as exc:
            nan = float("nan")
            rows.append(BetaRow(e, nan, nan, nan, nan, {}, 0, f"{type(exc).__name__}: {exc}"))
    return rows


def export_solution(sol: HjbSolution, sys, csv_path, json_path, dens: ClosedLoopDensity1D | None = None,
                    extra: dict | None = None) -> None:
    """CSV columns x, V, v_star, log_rho; JSON header with scalars."""
    dens = dens or closed_loop_density(sol, sys)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "V", "v_star", "log_rho"])
        for row in zip(sol.grid.x, sol.V, sol.feedback, dens.log_density):
            w.writerow([repr(float(v)) for v in row])
    head = {
        "epsilon": sol.epsilon, "nu": sol.nu, "beta": sol.beta, "residual": sol.residual_sup,
        "effort": control_effort(sol, dens), "mean_penalty": mean_penalty(sol, dens, sys),
        "grid": {"lo": sol.grid.lo, "hi": sol.grid.hi, "n": sol.grid.n}, "scheme": sol.scheme,
        "v_shift": sol.v_shift, "mean": dens.mean, "variance": dens.variance,
        "mass_near": {repr(k): v for k, v in dens.mass_near.items()}, "radius": dens.radius,
    }
    if extra:
        head.update(extra)
    with open(json_path, "w") as fh:
        json.dump(head, fh, indent=2, sort_keys=True)
