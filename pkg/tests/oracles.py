"""Independent numerical oracles shared by the unit and acceptance tests."""
import warnings

import numpy as np
from scipy import integrate


def quad_posterior(prior, psi, v):
    """Posterior mean and variance by adaptive quadrature of ``p(x) exp(-(v/2)(x-psi)^2)``.

    A point mass at zero contributes its weight times the likelihood at zero.
    """
    moments = np.zeros(3)
    for weight, var in prior.components():
        if var == 0.0:
            moments[0] += weight * np.exp(-0.5 * v * psi**2)
            continue
        norm = weight / np.sqrt(2 * np.pi * var)
        centre = psi * var * v / (1 + var * v)
        width = 1.0 / np.sqrt(v + 1.0 / var)
        lo, hi = centre - 40 * width, centre + 40 * width
        for k in range(3):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                moments[k] += integrate.quad(
                    lambda x: x**k * norm * np.exp(-0.5 * x * x / var - 0.5 * v * (x - psi) ** 2),
                    lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0]
    mean = moments[1] / moments[0]
    return mean, moments[2] / moments[0] - mean**2


def finite_difference_slope(prior, psi, v, rel_step=1e-5):
    """Central difference of the posterior mean in ``psi``."""
    h = rel_step / np.sqrt(v)
    return (prior.denoise(psi + h, v)[0] - prior.denoise(psi - h, v)[0]) / (2 * h)
