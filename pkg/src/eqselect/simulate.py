"""Monte Carlo verification of the controlled SDE

    dX = (m(X) + eps U) dt + eps^nu dW

by Euler-Maruyama, with online stationary statistics over independent
replicas. Each replica owns a generator spawned from one seed sequence, so a
run is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import matctrl
from .dynamics import Equilibrium, LocalEnergyForm, VectorFieldSystem, local_energy_form
from .errors import BlowUpError, DomainError, NumericFailure, StatisticalPowerError

TRACE_MAGIC = b"EQSTRACE"


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    nu: float
    T: float = 200.0
    dt: float = 0.01
    burn_in: float | None = None
    seed: int = 0
    replicas: int = 8
    x0: tuple | float | None = None
    thin: int = 10
    chunk: int = 2000
    radius: float | None = None
    bins: int = 200

    def __post_init__(self):
        if not (0 < self.epsilon < 1):
            raise DomainError("epsilon must lie in (0, 1)")
        if not self.nu > 0:
            raise DomainError("nu must be positive")
        if not (self.dt > 0 and self.T > 0):
            raise DomainError("dt and T must be positive")
        if self.dt > 0.01:
            warnings.warn(f"dt={self.dt} exceeds 0.01", RuntimeWarning, stacklevel=3)
        if not self.burn < self.T:
            raise DomainError("burn_in must be smaller than T")
        if self.replicas < 1 or self.thin < 1 or self.chunk < 1:
            raise DomainError("replicas, thin and chunk must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    @property
    def burn(self) -> float:
        return 0.1 * self.T if self.burn_in is None else float(self.burn_in)

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def burn_steps(self) -> int:
        return int(round(self.burn / self.dt))


@dataclass(frozen=True)
class ControlField:
    """Stationary Markov control ``x -> u``; evaluator maps ``(n, d)`` to ``(n, d)``."""

    kind: str
    evaluator: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    KINDS = ("zero", "hjb_feedback", "barv", "tube", "gradient_shaping", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown control kind {self.kind!r}")

    def __call__(self, x) -> np.ndarray:
        return self.evaluator(x)


def zero_control(dim: int = 1) -> ControlField:
    return ControlField("zero", lambda x: np.zeros_like(x))


def hjb_feedback(sol) -> ControlField:
    """Optimal feedback of an HJB solution, linear between grid nodes."""
    xs, fb = sol.grid.x, sol.feedback

    def ev(x):
        return np.interp(x[:, 0], xs, fb).reshape(-1, 1)

    return ControlField("hjb_feedback", ev, {"epsilon": sol.epsilon, "nu": sol.nu, "beta": sol.beta})


def barv_control(sys: VectorFieldSystem, eq: Equilibrium, epsilon: float) -> ControlField:
    """``((M - Q)(x - z) - m(x)) / eps``: the closed loop is exactly linear about ``z``."""
    pair = matctrl.solve_degenerate_riccati(eq.jacobian)
    K = eq.jacobian - pair.Q
    z = eq.z

    def ev(x):
        return ((x - z) @ K.T - sys.m(x).reshape(x.shape)) / epsilon

    return ControlField("barv", ev, {"z": z.tolist(), "Q": pair.Q.tolist(), "Sigma": pair.Sigma.tolist()})


def tube_matrix(M) -> np.ndarray:
    """``R`` with ``M R^-1 + R^-1 M^T = -4 I``, scaled so ``trace(R) <= 1``."""
    Rinv = matctrl.solve_lyapunov(M, 4.0 * np.eye(np.asarray(M).shape[0]))
    R = np.linalg.inv(Rinv)
    R = 0.5 * (R + R.T)
    tr = float(np.trace(R))
    return R / tr if tr > 1 else R


def tube_control(sys: VectorFieldSystem, eq: Equilibrium, epsilon: float, nu: float) -> ControlField:
    """Zero inside the tube ``|R(x - z)| < eps^(nu/2)``, linearising ``(M(x - z) - m(x)) / eps`` outside."""
    if not eq.is_stable:
        raise DomainError("tube control needs a stable equilibrium")
    M = eq.jacobian
    R = tube_matrix(M)
    z = eq.z
    thresh = epsilon ** (nu / 2)

    def ev(x):
        y = x - z
        u = (y @ M.T - sys.m(x).reshape(x.shape)) / epsilon
        inside = np.linalg.norm(y @ R.T, axis=1) < thresh
        u[inside] = 0.0
        return u

    return ControlField("tube", ev, {"z": z.tolist(), "R": R.tolist(), "threshold": thresh})


def gradient_shaping_control(sys: VectorFieldSystem, epsilon: float, grad_W=None,
                             eq: Equilibrium | None = None) -> ControlField:
    """``-(m + grad W) / eps``, so the closed loop is the gradient flow of ``W``.

    Without ``grad_W`` the local quadratic energy of the stable ``eq`` is used.
    """
    if grad_W is None:
        if eq is None or not eq.is_stable:
            raise DomainError("need grad_W or a stable equilibrium")
        form: LocalEnergyForm = local_energy_form(eq)
        grad_W = form.gradient

    def ev(x):
        return -(sys.m(x).reshape(x.shape) + np.asarray(grad_W(x)).reshape(x.shape)) / epsilon

    return ControlField("gradient_shaping", ev)


def custom_control(fn: Callable[[np.ndarray], np.ndarray], **params) -> ControlField:
    return ControlField("custom", fn, dict(params))


@dataclass(frozen=True)
class StationaryEstimate:
    mean: np.ndarray
    covariance: np.ndarray
    mass_near: dict
    radius: float
    dist2_mean: float
    J_hat: float
    G_hat: float
    ell_mean: float
    hist_edges: np.ndarray | None
    hist_counts: np.ndarray | None
    stderr: dict
    n_samples: int
    samples: np.ndarray = field(repr=False)
    config: SimConfig = None
    control_kind: str = ""
    visited: tuple = ()

    def as_dict(self) -> dict:
        d = {
            "mean": self.mean.tolist(), "covariance": self.covariance.tolist(),
            "mass_near": {repr(k): v for k, v in self.mass_near.items()}, "radius": self.radius,
            "dist2_mean": self.dist2_mean, "J_hat": self.J_hat, "G_hat": self.G_hat,
            "ell_mean": self.ell_mean, "stderr": self.stderr, "n_samples": self.n_samples,
            "control": self.control_kind,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.config).items()},
        }
        if self.hist_counts is not None:
            d["histogram"] = {"edges": self.hist_edges.tolist(), "counts": self.hist_counts.tolist()}
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)

    def flat_samples(self) -> np.ndarray:
        """Thinned post-burn-in samples, replicas stacked: shape ``(n, d)``."""
        s = self.samples
        return s.reshape(-1, s.shape[-1])


def _points_array(points, dim) -> np.ndarray:
    if points is None:
        return np.zeros((0, dim))
    out = []
    for p in points:
        if isinstance(p, Equilibrium):
            out.append(p.z)
        else:
            out.append(np.atleast_1d(np.asarray(p, dtype=float)))
    return np.asarray(out, dtype=float).reshape(-1, dim)


def _x0(sys, cfg) -> np.ndarray:
    if cfg.x0 is None:
        lo, hi = sys.box
        return 0.5 * (lo + hi)
    return np.atleast_1d(np.asarray(cfg.x0, dtype=float)).reshape(sys.dim)


def integrate(sys: VectorFieldSystem, control: ControlField, cfg: SimConfig, points=None,
              trace_path=None) -> StationaryEstimate:
    """Euler-Maruyama over ``cfg.replicas`` independent paths.

    ``points`` (equilibria or coordinates) define the balls for
    ``mass_near`` and the set for ``dist2_mean``; ``cfg.radius`` defaults to
    0.3 times the smallest gap between them. Thinned post-burn-in samples
    are kept and optionally streamed to ``trace_path``.
    """
    d = sys.dim
    R = cfg.replicas
    pts = _points_array(points, d)
    if cfg.radius is not None:
        radius = float(cfg.radius)
    elif len(pts) > 1:
        gaps = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        radius = 0.3 * float(gaps[np.triu_indices(len(pts), 1)].min())
    else:
        radius = 0.3
    lo, hi = sys.box
    span = hi - lo
    out_lo, out_hi = lo - 0.5 * span, hi + 0.5 * span
    noise = cfg.epsilon ** cfg.nu * math.sqrt(cfg.dt)
    gens = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(cfg.seed).spawn(R)]
    x = np.tile(_x0(sys, cfg), (R, 1))
    eps, dt = cfg.epsilon, cfg.dt
    n_steps, n_burn = cfg.steps, cfg.burn_steps
    # per-replica accumulators
    ref = x[0].copy()
    n_acc = 0
    s1 = np.zeros((R, d))
    s2 = np.zeros((R, d, d))
    s_ell = np.zeros(R)
    s_eff = np.zeros(R)
    s_d2 = np.zeros(R)
    s_mass = np.zeros((R, len(pts)))
    edges = np.linspace(lo[0], hi[0], cfg.bins + 1) if d == 1 else None
    counts = np.zeros(cfg.bins, dtype=np.int64) if d == 1 else None
    kept = []
    vmin = np.full(d, np.inf)
    vmax = np.full(d, -np.inf)
    fh = _open_trace(trace_path, cfg, sys, control) if trace_path else None
    step = 0
    try:
        while step < n_steps:
            c = min(cfg.chunk, n_steps - step)
            xi = np.stack([g.standard_normal((c, d)) for g in gens], axis=1)
            xs = np.empty((c, R, d))
            us = np.empty((c, R, d))
            for j in range(c):
                u = control(x)
                xs[j] = x
                us[j] = u
                x = x + (sys.m(x).reshape(R, d) + eps * u) * dt + noise * xi[j]
            bad = np.any((xs < out_lo) | (xs > out_hi) | ~np.isfinite(xs), axis=(1, 2))
            if bad.any():
                j = int(np.argmax(bad))
                raise BlowUpError(f"trajectory left the doubled box at t={(step + j) * dt:.4g}",
                                  exit_time=(step + j) * dt)
            first = max(0, n_burn - step)
            if first < c:
                xa = xs[first:]
                ua = us[first:]
                m_ = xa.shape[0]
                n_acc += m_
                y = xa - ref
                s1 += y.sum(axis=0)
                s2 += np.einsum("trj,trk->rjk", y, y)
                flat = xa.reshape(-1, d)
                s_ell += sys.ell(flat).reshape(m_, R).sum(axis=0)
                s_eff += 0.5 * np.sum(ua ** 2, axis=2).sum(axis=0)
                if len(pts):
                    dist = np.linalg.norm(xa[:, :, None, :] - pts[None, None], axis=-1)
                    s_d2 += (np.min(dist, axis=2) ** 2).sum(axis=0)
                    s_mass += (dist <= radius).sum(axis=0)
                if d == 1:
                    counts += np.histogram(xa[:, :, 0], bins=edges)[0]
                vmin = np.minimum(vmin, flat.min(axis=0))
                vmax = np.maximum(vmax, flat.max(axis=0))
                # thinning on the global step index keeps samples independent of chunking
                idx = np.arange(step + first, step + c)
                sel = (idx - n_burn) % cfg.thin == 0
                thin = xa[sel]
                kept.append(thin)
                if fh is not None:
                    fh.write(np.ascontiguousarray(thin, dtype="<f8").tobytes())
            step += c
    finally:
        if fh is not None:
            fh.close()
    if n_acc == 0:
        raise StatisticalPowerError("no post-burn-in samples")
    N = n_acc * R
    mean_r = s1 / n_acc + ref
    m1 = s1.sum(axis=0) / N
    mean = m1 + ref
    cov = s2.sum(axis=0) / N - np.outer(m1, m1)
    ell_r, eff_r = s_ell / n_acc, s_eff / n_acc
    ell_mean, G_hat = float(s_ell.sum() / N), float(s_eff.sum() / N)
    mass_r = s_mass / n_acc
    mass = {(float(p[0]) if d == 1 else tuple(p)): float(s_mass[:, i].sum() / N) for i, p in enumerate(pts)}

    def se(v):
        return float(np.std(v, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")

    stderr = {
        "J_hat": se(ell_r + eff_r), "G_hat": se(eff_r), "ell_mean": se(ell_r),
        "mean": [se(mean_r[:, j]) for j in range(d)], "dist2_mean": se(s_d2 / n_acc),
        "mass_near": [se(mass_r[:, i]) for i in range(len(pts))],
    }
    cov_r = s2 / n_acc - np.einsum("rj,rk->rjk", s1 / n_acc, s1 / n_acc)
    stderr["variance"] = [se(cov_r[:, j, j]) for j in range(d)]
    samples = np.concatenate(kept, axis=0) if kept else np.zeros((0, R, d))
    est = StationaryEstimate(
        mean=mean, covariance=0.5 * (cov + cov.T), mass_near=mass, radius=radius,
        dist2_mean=float(s_d2.sum() / N) if len(pts) else float("nan"),
        J_hat=ell_mean + G_hat, G_hat=G_hat, ell_mean=ell_mean, hist_edges=edges, hist_counts=counts,
        stderr=stderr, n_samples=N, samples=samples, config=cfg, control_kind=control.kind,
        visited=(vmin, vmax))
    _stiffness_warning(sys, control, cfg, vmin, vmax)
    return est


def _stiffness_warning(sys, control, cfg, vmin, vmax) -> None:
    # 0.1 / max |db/dx| over the visited region, by central differences
    if sys.dim != 1 or not np.all(np.isfinite(vmin)):
        return
    xs = np.linspace(vmin[0], vmax[0], 101).reshape(-1, 1)
    b = sys.m(xs).reshape(-1) + cfg.epsilon * control(xs).reshape(-1)
    h = xs[1, 0] - xs[0, 0]
    if h <= 0:
        return
    slope = float(np.max(np.abs(np.diff(b)) / h))
    if slope > 0 and cfg.dt > 0.1 / slope:
        warnings.warn(f"dt={cfg.dt} exceeds 0.1/max|db/dx|={0.1 / slope:.3g} on the visited region",
                      RuntimeWarning, stacklevel=3)


# binary trace files

def _open_trace(path, cfg, sys, control):
    header = json.dumps({
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "system": sys.name, "control": control.kind, "dim": sys.dim, "replicas": cfg.replicas,
        "dtype": "<f8", "layout": "sample, replica, coordinate",
    }, sort_keys=True).encode()
    fh = open(path, "wb")
    fh.write(TRACE_MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    return fh


def read_trace(path) -> tuple[dict, np.ndarray]:
    """Header dict and samples of shape ``(n, replicas, dim)``."""
    with open(path, "rb") as fh:
        if fh.read(len(TRACE_MAGIC)) != TRACE_MAGIC:
            raise DomainError("not a trace file")
        (hl,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hl).decode())
        data = np.frombuffer(fh.read(), dtype="<f8")
    R, d = header["replicas"], header["dim"]
    return header, data.reshape(-1, R, d)


# derived statistics

@dataclass(frozen=True)
class ScaledStatistics:
    center: np.ndarray
    scale: float
    count: int
    fraction: float
    mean: np.ndarray
    covariance: np.ndarray
    hist_edges: np.ndarray | None
    hist_density: np.ndarray | None


def scaled_statistics(source, z, epsilon: float, nu: float, window_radius: float,
                      min_samples: int = 10_000, bins: int = 60) -> ScaledStatistics:
    """Covariance and histogram of ``(x - z) / eps^nu`` for samples within ``window_radius`` of ``z``.

    ``source`` is a StationaryEstimate or an array of samples ``(n, d)``.
    """
    X = source.flat_samples() if isinstance(source, StationaryEstimate) else np.asarray(source, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    z = np.atleast_1d(np.asarray(z.z if isinstance(z, Equilibrium) else z, dtype=float))
    inside = np.linalg.norm(X - z, axis=1) <= window_radius
    cnt = int(inside.sum())
    if cnt < min_samples:
        raise StatisticalPowerError(f"only {cnt} samples in the window, need {min_samples}")
    s = epsilon ** nu
    Y = (X[inside] - z) / s
    mu = Y.mean(axis=0)
    C = np.atleast_2d(np.cov(Y, rowvar=False))
    edges = dens = None
    if Y.shape[1] == 1:
        dens, edges = np.histogram(Y[:, 0], bins=bins, density=True)
    return ScaledStatistics(center=z, scale=s, count=cnt, fraction=cnt / len(X), mean=mu, covariance=C,
                            hist_edges=edges, hist_density=dens)


@dataclass(frozen=True)
class SlopeReport:
    nu: float
    epsilons: np.ndarray
    dist2: np.ndarray
    slope: float
    intercept: float
    expected_slope: float
    mass_outside: np.ndarray
    kappa2: float

    @property
    def slope_error(self) -> float:
        return self.slope - self.expected_slope


def fit_loglog(eps, values) -> tuple[float, float]:
    k, c = np.polyfit(np.log(eps), np.log(values), 1)
    return float(k), float(c)


def moment_scaling_study(sys, control_family: Callable[[float], ControlField], nu: float, eps_list,
                         cfg: SimConfig, points, kappa2: float = 3.0) -> SlopeReport:
    """Fit ``log E dist(X, S)^2`` against ``log eps``; the expected slope is ``2 min(nu, 2)``.

    ``points`` is the set ``S`` (usually all equilibria). Also reports the
    fraction of samples farther than ``kappa2 eps^min(nu, 1)`` from ``S``.
    """
    eps = np.asarray(sorted(eps_list), dtype=float)
    if len(eps) < 4 or eps[-1] / eps[0] < 9.99:
        raise DomainError("need at least 4 epsilons spanning a decade")
    pts = _points_array(points, sys.dim)
    d2, outside = [], []
    for e in eps:
        c = replace(cfg, epsilon=float(e), nu=float(nu))
        est = integrate(sys, control_family(float(e)), c, pts)
        d2.append(est.dist2_mean)
        X = est.flat_samples()
        dist = np.min(np.linalg.norm(X[:, None] - pts[None], axis=-1), axis=1)
        outside.append(float(np.mean(dist > kappa2 * e ** min(nu, 1.0))))
    d2 = np.asarray(d2)
    k, c = fit_loglog(eps, d2)
    return SlopeReport(nu=float(nu), epsilons=eps, dist2=d2, slope=k, intercept=c,
                       expected_slope=2 * min(nu, 2.0), mass_outside=np.asarray(outside), kappa2=kappa2)


@dataclass(frozen=True)
class BarvRow:
    epsilon: float
    effort: float
    effort_ratio: float
    unstable_trace: float
    ell_mean: float
    ell_at_z: float
    covariance: np.ndarray
    predicted_covariance: np.ndarray
    covariance_rel_error: float


def barv_effort_check(sys, eq: Equilibrium, nu: float, eps_list, cfg: SimConfig) -> list[BarvRow]:
    """Effort and covariance under the linearising control about ``eq``.

    The closed loop is ``dX = (M - Q)(X - z) dt + eps^nu dW``, so the law is
    ``N(z, eps^(2 nu) Sigma)`` and the effort over ``eps^(2 nu - 2)`` tends to
    the unstable trace of ``M``.
    """
    pair = matctrl.solve_degenerate_riccati(eq.jacobian)
    rows = []
    for e in eps_list:
        c = replace(cfg, epsilon=float(e), nu=float(nu), x0=tuple(eq.z.tolist()))
        try:
            est = integrate(sys, barv_control(sys, eq, float(e)), c, [eq])
        except BlowUpError as exc:
            raise NumericFailure(f"blow-up under the linearising control: {exc}") from exc
        pred = e ** (2 * nu) * pair.Sigma
        err = float(np.linalg.norm(est.covariance - pred) / np.linalg.norm(pred))
        rows.append(BarvRow(epsilon=float(e), effort=est.G_hat, effort_ratio=est.G_hat / e ** (2 * nu - 2),
                            unstable_trace=eq.unstable_trace, ell_mean=est.ell_mean, ell_at_z=eq.penalty_at,
                            covariance=est.covariance, predicted_covariance=pred, covariance_rel_error=err))
    return rows


def ks_distance(samples, x_grid, cdf_values) -> float:
    """Kolmogorov-Smirnov distance between samples and a tabulated CDF."""
    from scipy.stats import kstest

    s = np.asarray(samples, dtype=float).reshape(-1)
    return float(kstest(s, lambda v: np.interp(v, x_grid, cdf_values)).statistic)
