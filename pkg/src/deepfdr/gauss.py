"""Standard normal density and distribution helpers."""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_pdf(x, mean=0.0, sd=1.0):
    """Gaussian density, vectorized."""
    z = (np.asarray(x, dtype=np.float64) - mean) / sd
    return _INV_SQRT_2PI / sd * np.exp(-0.5 * z * z)


def normal_cdf(x):
    """Standard normal CDF via the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def two_sided_pvalue(z):
    """p = 2 * (1 - Phi(|z|)), computed as erfc(|z| / sqrt(2)) for tail accuracy."""
    return erfc(np.abs(np.asarray(z, dtype=np.float64)) / _SQRT2)
