import numpy as np
import pytest
from scipy.linalg import eigh_tridiagonal

from eqselect import bench, dynamics


def planted_matrix(rng, d, lo=0.2, hi=3.0):
    """Random real matrix with a prescribed dichotomous spectrum: ``P D P^-1``."""
    blocks, k = [], 0
    while k < d:
        if d - k >= 2 and rng.random() < 0.4:
            a = rng.choice([-1, 1]) * rng.uniform(lo, hi)
            w = rng.uniform(0.1, 2.0)
            blocks.append(np.array([[a, w], [-w, a]]))
            k += 2
        else:
            blocks.append(np.array([[rng.choice([-1, 1]) * rng.uniform(lo, hi)]]))
            k += 1
    D = np.zeros((d, d))
    i = 0
    for b in blocks:
        n = b.shape[0]
        D[i:i + n, i:i + n] = b
        i += n
    Qo, _ = np.linalg.qr(rng.standard_normal((d, d)))
    P = Qo @ (np.eye(d) + 0.3 * np.triu(rng.standard_normal((d, d)), 1))
    M = P @ D @ np.linalg.inv(P)
    ev = np.linalg.eigvals(D)
    return M, float(np.sum(ev.real[ev.real > 0]))


def schrodinger_beta(sys, eps, nu, lo, hi, n):
    """Independent oracle for the optimal value.

    The substitution ``psi = exp(-Phi) g`` with ``Phi' = m / eps^2`` turns the
    transformed operator into ``-(a/2) g'' + U g`` with
    ``U = l + m^2 / (2 eps^2) + eps^(2 nu - 2) m' / 2``, which is self-adjoint.
    Lowest Dirichlet eigenvalue with the 3-point Laplacian.
    """
    x = np.linspace(lo, hi, n)[1:-1]
    h = (hi - lo) / (n - 1)
    a = eps ** (4 * nu - 2)
    m = sys.m1(x)
    U = sys.ell1(x) + m ** 2 / (2 * eps ** 2) + eps ** (2 * nu - 2) * sys.dm1(x) / 2
    off = np.full(len(x) - 1, -a / (2 * h * h))
    return float(eigh_tridiagonal(a / h ** 2 + U, off, select="i", select_range=(0, 0),
                                  eigvals_only=True)[0])


@pytest.fixture(scope="session")
def dw1():
    return bench.get_problem("double_well_1")


@pytest.fixture(scope="session")
def dw2():
    return bench.get_problem("double_well_2")


@pytest.fixture(scope="session")
def dw1_eqs(dw1):
    return dynamics.find_equilibria(dw1.system)


@pytest.fixture(scope="session")
def dw2_eqs(dw2):
    return dynamics.find_equilibria(dw2.system)


def eq_at(eqs, z):
    return min(eqs, key=lambda e: abs(float(e.z[0]) - z))
