"""Independent reference values used by the tests.

Nothing here imports magtube.
"""

import math

import numpy as np
from scipy.optimize import brentq
from scipy.special import j0, j1, k0, k1


def circular_well_energy(V0: float, a: float) -> float:
    """Ground energy of -Laplace - V0 1{r<a} in the plane by Bessel matching.

    Inside u = J0(k r), outside u = K0(kappa r), k^2 + kappa^2 = V0; the
    logarithmic derivatives agree at r = a.
    """
    j01 = 2.404825557695773

    def mismatch(kappa):
        k = math.sqrt(V0 - kappa * kappa)
        return k * j1(k * a) / j0(k * a) - kappa * k1(kappa * a) / k0(kappa * a)

    lo = math.sqrt(max(V0 - (j01 / a) ** 2, 0.0)) + 1e-12
    kappa = brentq(mismatch, lo, math.sqrt(V0) - 1e-12, xtol=1e-15, rtol=1e-15)
    return -kappa * kappa


def dirichlet_1d(n: int, L: float) -> np.ndarray:
    """Eigenvalues of the 3-point Dirichlet Laplacian with n interior nodes on [0, L]."""
    h = L / (n + 1)
    j = np.arange(1, n + 1)
    return 4.0 / h**2 * np.sin(np.pi * j * h / (2 * L)) ** 2


def dirichlet_box_lowest(counts, lengths) -> float:
    return float(sum(dirichlet_1d(n, L)[0] for n, L in zip(counts, lengths)))
