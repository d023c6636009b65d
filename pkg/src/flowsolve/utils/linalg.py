"""Small dense linear-algebra helpers shared by the prior and oracle code."""

import logging

import numpy as np
from scipy import linalg

from flowsolve.utils.exceptions import SingularSystemError

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
JITTER_RETRIES = 3


def robust_cholesky(matrix, what="covariance"):
    """Lower Cholesky factor of a symmetric matrix with jitter escalation.

    The plain factorization is tried first. On failure a diagonal jitter of
    ``1e-10`` is added and grown by a factor of 10, at most three times.

    Parameters
    ----------
    matrix : numpy array
        Symmetric (d, d) matrix.
    what : str
        Name used in the error message.

    Returns
    -------
    numpy array
        The lower-triangular factor L with ``L @ L.T ~= matrix``.

    Raises
    ------
    SingularSystemError
        If the matrix is not positive definite even after the last retry.
    """
    matrix = 0.5 * (matrix + matrix.T)
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        pass

    jitter = JITTER_START
    eye = np.eye(matrix.shape[0])
    for _ in range(JITTER_RETRIES):
        try:
            factor = linalg.cholesky(matrix + jitter * eye, lower=True)
            logger.debug(f"{what} factorized with jitter {jitter:.1e}")
            return factor
        except linalg.LinAlgError:
            jitter *= JITTER_GROWTH
    raise SingularSystemError(f"{what} is numerically singular (jitter up to {jitter / JITTER_GROWTH:.1e})")


def cholesky_solve(factor, rhs):
    """Solve ``(L L^T) x = rhs`` for rhs with the state on the last axis."""
    rhs = np.asarray(rhs, dtype=float)
    flat = rhs.reshape(-1, rhs.shape[-1]).T
    sol = linalg.cho_solve((factor, True), flat)
    return sol.T.reshape(rhs.shape)


def gaussian_logpdf(x, mean, factor):
    """Log density of N(mean, L L^T) at x, batched over leading axes of x."""
    diff = np.asarray(x, dtype=float) - mean
    flat = diff.reshape(-1, diff.shape[-1]).T
    white = linalg.solve_triangular(factor, flat, lower=True)
    maha = np.sum(white**2, axis=0).reshape(diff.shape[:-1])
    logdet = 2.0 * np.sum(np.log(np.diag(factor)))
    dim = diff.shape[-1]
    return -0.5 * (dim * np.log(2.0 * np.pi) + logdet + maha)
