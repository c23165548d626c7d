"""Scalar kernels shared by the gradients and Fisher blocks.

Every function accepts a float or an ndarray and broadcasts.  Inputs must be
finite; a NaN or Inf raises ``ValueError`` so that a diverging run fails at
the first bad value rather than propagating silently.
"""
import numpy as np
from scipy.special import expit

# below this |phi| the tanh ratio is replaced by its Taylor series
PG_SERIES_CUTOFF = 1e-6


def _finite(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to kernel")
    return x


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def sigmoid(x):
    x = _finite(x)
    return _out(expit(x), x)


def pg_mean(phi):
    """Conditional mean of a PG(1, phi) variable, ``tanh(phi/2) / (2 phi)``.

    Even in ``phi`` with maximum 1/4 at the origin.
    """
    phi = _finite(phi)
    small = np.abs(phi) < PG_SERIES_CUTOFF
    safe = np.where(small, 1.0, phi)
    out = np.where(small, 0.25 - phi * phi / 48.0, np.tanh(0.5 * safe) / (2.0 * safe))
    return _out(out, phi)


def logistic_weight(phi):
    """``1 / (exp(-phi/2) + exp(phi/2))**2``, i.e. ``sigma(phi) * sigma(-phi)``."""
    phi = _finite(phi)
    return _out(expit(phi) * expit(-phi), phi)


def expected_kappa(phi, y):
    """Model-weighted kappa: ``+sigma(phi)/2`` for y=1, ``-sigma(-phi)/2`` for y=0."""
    phi = _finite(phi)
    y = np.asarray(y)
    out = np.where(y == 1, 0.5 * expit(phi), -0.5 * expit(-phi))
    return _out(out, phi)


def observed_kappa(y):
    y = np.asarray(y, dtype=np.float64)
    return _out(y - 0.5, y)


def expected_label(psi, z):
    """Model-weighted label for the logistic heads: ``sigma(psi)`` if z=+1, ``-sigma(-psi)`` if z=-1."""
    psi = _finite(psi)
    z = np.asarray(z)
    out = np.where(z > 0, expit(psi), -expit(-psi))
    return _out(out, psi)


def kappa(phi, y, mode="observed"):
    if mode == "observed":
        return observed_kappa(y) * np.ones_like(np.asarray(phi, dtype=np.float64))
    if mode == "expected":
        return expected_kappa(phi, y)
    raise ValueError(f"unknown kappa mode {mode!r}")


def label_weight(psi, z, mode="observed"):
    """Coefficient multiplying ``u_tilde / 2`` in the logistic-head gradient."""
    if mode == "observed":
        return np.asarray(z, dtype=np.float64) * np.ones_like(np.asarray(psi, dtype=np.float64))
    if mode == "expected":
        return expected_label(psi, z)
    raise ValueError(f"unknown kappa mode {mode!r}")
