"""Small dense linear-control algebra.

Spectra, Lyapunov and Sylvester equations (dense Kronecker solves), the
degenerate Riccati equation ``M^T Q + Q M = Q^2`` with ``M - Q`` Hurwitz, the
kappa-regularised Riccati equation used as an independent oracle, and the
stationary effort of a linear feedback gain.

All functions are pure; inputs are copied and results are fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError, NumericFailure

AXIS_TOL = 1e-9


def as_square(M, name: str = "M") -> np.ndarray:
    """Return ``M`` as a finite float ``(d, d)`` array or raise DomainError."""
    A = np.array(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DomainError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    return A


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: np.ndarray
    is_hurwitz: bool
    is_dichotomous: bool
    unstable_trace: float
    axis_tol: float = AXIS_TOL

    @property
    def index(self) -> int:
        """Number of eigenvalues strictly in the right half plane."""
        return int(np.sum(self.eigenvalues.real > self.axis_tol))


@dataclass(frozen=True)
class RiccatiPair:
    Q: np.ndarray
    Sigma: np.ndarray
    riccati_residual: float
    lyapunov_residual: float

    @property
    def gain_effort(self) -> float:
        return 0.5 * float(np.trace(self.Q))


def spectral_summary(M, axis_tol: float = AXIS_TOL) -> SpectralSummary:
    A = as_square(M)
    try:
        ev = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"eigensolver failed: {exc}", matrix=A) from exc
    re = ev.real
    unstable = float(np.sum(re[re > axis_tol])) if np.any(re > axis_tol) else 0.0
    order = np.lexsort((ev.imag, re))
    return SpectralSummary(
        eigenvalues=ev[order],
        is_hurwitz=bool(np.all(re < -axis_tol)),
        is_dichotomous=bool(np.min(np.abs(re)) > axis_tol),
        unstable_trace=unstable,
        axis_tol=axis_tol,
    )


def unstable_trace(M, axis_tol: float = AXIS_TOL) -> float:
    return spectral_summary(M, axis_tol).unstable_trace


def _require_hurwitz(A: np.ndarray, what: str) -> None:
    ev = np.linalg.eigvals(A)
    if np.max(ev.real) >= 0.0:
        raise DomainError(f"{what} is not Hurwitz (max real part {np.max(ev.real):.3g})")


def solve_sylvester(A, B, C) -> np.ndarray:
    """Solve ``A X + X B = C`` by a dense Kronecker linear solve."""
    A = as_square(A, "A")
    B = as_square(B, "B")
    C = np.array(C, dtype=float).reshape(A.shape[0], B.shape[0])
    p, q = A.shape[0], B.shape[0]
    K = np.kron(np.eye(q), A) + np.kron(B.T, np.eye(p))
    try:
        x = np.linalg.solve(K, C.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("singular Kronecker system in Sylvester solve", matrix=K) from exc
    return x.reshape(p, q, order="F")


def solve_lyapunov(A, C) -> np.ndarray:
    """Symmetric ``X`` with ``A X + X A^T = -C`` for Hurwitz ``A``."""
    A = as_square(A, "A")
    C = as_square(C, "C")
    if C.shape != A.shape:
        raise DomainError("A and C must have the same shape")
    if not np.allclose(C, C.T, rtol=1e-12, atol=1e-12 * (1 + np.abs(C).max())):
        raise DomainError("C must be symmetric")
    _require_hurwitz(A, "A")
    X = solve_sylvester(A, A.T, -C)
    return 0.5 * (X + X.T)


def lyapunov_residual(A, X, C) -> float:
    A, X, C = (np.asarray(v, dtype=float) for v in (A, X, C))
    return float(np.linalg.norm(A @ X + X @ A.T + C))


def riccati_residual(M, Q) -> float:
    M, Q = np.asarray(M, dtype=float), np.asarray(Q, dtype=float)
    return float(np.linalg.norm(M.T @ Q + Q @ M - Q @ Q))


def _unstable_left_basis(M: np.ndarray, axis_tol: float) -> np.ndarray:
    """Orthonormal rows ``U`` (q x d) with ``U M = A U``, ``A`` anti-Hurwitz."""
    d = M.shape[0]
    _, Z, q = scipy.linalg.schur(M.T, output="real", sort=lambda x, y: x > axis_tol)
    if q == 0:
        return np.zeros((0, d))
    return Z[:, :q].T


def solve_degenerate_riccati(M, axis_tol: float = AXIS_TOL) -> RiccatiPair:
    """Stabilising solution of ``M^T Q + Q M = Q^2`` and its Lyapunov covariance.

    The unstable left-invariant subspace of ``M`` is spanned by orthonormal
    rows ``U`` with ``U M = A U``. On that block ``A Y + Y A^T = I`` gives
    ``Q2 = Y^{-1}`` solving ``A^T Q2 + Q2 A = Q2^2`` with ``A - Q2`` Hurwitz,
    and ``Q = U^T Q2 U``. One Newton step on the full residual follows.
    """
    M = as_square(M)
    spec = spectral_summary(M, axis_tol)
    if not spec.is_dichotomous:
        raise DomainError("matrix is not dichotomous (eigenvalue on the imaginary axis)")
    d = M.shape[0]
    U = _unstable_left_basis(M, axis_tol)
    q = U.shape[0]
    if q == 0:
        Q = np.zeros((d, d))
    else:
        A = U @ M @ U.T
        Y = solve_lyapunov(-A, np.eye(q))
        Q2 = np.linalg.inv(Y)
        Q2 = 0.5 * (Q2 + Q2.T)
        Q = U.T @ Q2 @ U
        Q = 0.5 * (Q + Q.T)
        F = M.T @ Q + Q @ M - Q @ Q
        try:
            dQ = solve_lyapunov((M - Q).T, F)
        except DomainError as exc:
            raise NumericFailure("M - Q lost the Hurwitz property", matrix=M) from exc
        Q = Q + 0.5 * (dQ + dQ.T)
    K = M - Q
    if np.max(np.linalg.eigvals(K).real) >= 0.0:
        raise NumericFailure("M - Q is not Hurwitz after refinement", matrix=M)
    Sigma = solve_lyapunov(K, np.eye(d))
    return RiccatiPair(
        Q=Q,
        Sigma=Sigma,
        riccati_residual=riccati_residual(M, Q),
        lyapunov_residual=lyapunov_residual(K, Sigma, np.eye(d)),
    )


def solve_riccati_kappa(M, kappa: float) -> np.ndarray:
    """Positive definite ``Q`` with ``Q^2 - M^T Q - Q M = 2 kappa I``.

    Standard continuous-time algebraic Riccati equation with unit input and
    weight matrices, solved through scipy's Hamiltonian Schur method.
    """
    M = as_square(M)
    if not kappa > 0:
        raise DomainError(f"kappa must be positive, got {kappa}")
    d = M.shape[0]
    eye = np.eye(d)
    try:
        Q = scipy.linalg.solve_continuous_are(M, eye, 2.0 * kappa * eye, eye)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"CARE solver failed: {exc}", matrix=M) from exc
    return 0.5 * (Q + Q.T)


def gain_cost(M, G) -> float:
    """Stationary effort ``trace(G Sigma_G G^T) / 2`` of the feedback ``-G x``."""
    M = as_square(M)
    G = as_square(G, "G")
    if G.shape != M.shape:
        raise DomainError("M and G must have the same shape")
    K = M - G
    _require_hurwitz(K, "M - G")
    Sigma = solve_lyapunov(K, np.eye(M.shape[0]))
    return 0.5 * float(np.trace(G @ Sigma @ G.T))


def stable_unstable_split(M, axis_tol: float = AXIS_TOL):
    """Block-diagonalise ``M``: returns ``(T, M1, M2)`` with
    ``T M T^{-1} = diag(M1, -M2)``, both ``M1`` and ``M2`` Hurwitz.

    Real Schur form sorted stable-first, then a Sylvester solve removes the
    coupling block.
    """
    M = as_square(M)
    spec = spectral_summary(M, axis_tol)
    if not spec.is_dichotomous:
        raise DomainError("matrix is not dichotomous (eigenvalue on the imaginary axis)")
    d = M.shape[0]
    S, Z, k = scipy.linalg.schur(M, output="real", sort=lambda x, y: x < 0)
    if k in (0, d):
        T = Z.T
        return T, S[:k, :k], -S[k:, k:]
    S11, S12, S22 = S[:k, :k], S[:k, k:], S[k:, k:]
    X = solve_sylvester(S11, -S22, -S12)
    Winv = np.eye(d)
    Winv[:k, k:] = -X
    T = Winv @ Z.T
    return T, S11, -S22
