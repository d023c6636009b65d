"""Exact posterior machinery for Gaussian-mixture priors.

With q(x_1) a Gaussian mixture and y = A x_1 + sigma_y eps, every quantity the
guided sampler approximates is available in closed form: the posterior
q(x_1 | y), the conditional denoiser E[x_1 | x_t, y], its vector field and the
log-evidence log q(y | x_t). These are the references that guidance
approximations are measured against.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from flowsolve.model.denoisers import Denoiser, denoiser_to_vf
from flowsolve.model.gmm import GaussianMixture, gmm_log_marginal
from flowsolve.utils.exceptions import ConfigurationError, ShapeMismatchError, SingularSystemError
from flowsolve.utils.linalg import cholesky_solve, gaussian_logpdf, robust_cholesky

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PosteriorGMM(GaussianMixture):
    """The posterior q(x_1 | y), itself a Gaussian mixture.

    ``log_evidence`` is log q(y).
    """

    log_evidence: float = 0.0


def _check_inputs(gmm, op, sigma_y, y):
    if op.n_in != gmm.dim:
        raise ShapeMismatchError((op.n_out, gmm.dim), op.shape, what="operator")
    if sigma_y < 0:
        raise ConfigurationError(f"sigma_y must be non-negative, got {sigma_y}")
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != op.n_out:
        raise ShapeMismatchError((op.n_out,), y.shape, what="observation")
    return y


def exact_posterior(gmm, op, sigma_y, y):
    """Per-component conjugate update of a mixture prior.

    For each component, with S = A Sigma A^T + sigma_y^2 I:

        mu'    = mu + Sigma A^T S^{-1} (y - A mu)
        Sigma' = Sigma - Sigma A^T S^{-1} A Sigma
        pi'   ~ pi N(y; A mu, S)

    sigma_y = 0 conditions exactly on the affine set {A x = y} and needs A to
    have full row rank.

    Parameters
    ----------
    gmm : GaussianMixture
    op : LinearOperator
    sigma_y : float
    y : numpy array (n_out,)

    Returns
    -------
    PosteriorGMM
    """
    y = _check_inputs(gmm, op, sigma_y, y)
    if y.ndim != 1:
        raise ShapeMismatchError((op.n_out,), y.shape, what="observation")
    if sigma_y == 0 and op.rank < op.n_out:
        raise SingularSystemError(
            f"noiseless conditioning needs a full-row-rank operator, got rank {op.rank} < {op.n_out}"
        )
    a = op.to_dense()
    covs = gmm.covariance_matrices()
    log_terms = np.empty(gmm.n_components)
    means = np.empty_like(gmm.means)
    post_covs = np.empty_like(covs)
    for k in range(gmm.n_components):
        cov_at = covs[k] @ a.T
        factor = robust_cholesky(a @ cov_at + sigma_y**2 * np.eye(op.n_out), what=f"evidence covariance {k}")
        log_terms[k] = np.log(gmm.weights[k]) + gaussian_logpdf(y, a @ gmm.means[k], factor)
        gain = cholesky_solve(factor, cov_at)
        means[k] = gmm.means[k] + gain @ (y - a @ gmm.means[k])
        post = covs[k] - gain @ cov_at.T
        post_covs[k] = 0.5 * (post + post.T)
    log_evidence = float(logsumexp(log_terms))
    weights = np.exp(log_terms - log_evidence)
    weights /= weights.sum()
    logger.debug(f"posterior weights {np.round(weights, 6).tolist()}, log evidence {log_evidence:.6g}")
    return PosteriorGMM(weights=weights, means=means, covariances=post_covs, log_evidence=log_evidence)


def _joint_terms(gmm, a, sigma_y, alpha, sigma, x_t, y):
    """Per-component log N((x_t, y)) and E[x_1 | x_t, y] under the joint Gaussian."""
    n_in, n_out = gmm.dim, a.shape[0]
    x_t = np.asarray(x_t, dtype=float)
    y = np.broadcast_to(y, x_t.shape[:-1] + (n_out,))
    z = np.concatenate([x_t, y], axis=-1)
    h = np.vstack([alpha * np.eye(n_in), a])
    noise = np.diag(np.concatenate([np.full(n_in, sigma**2), np.full(n_out, sigma_y**2)]))
    covs = gmm.covariance_matrices()
    log_terms = np.empty(x_t.shape[:-1] + (gmm.n_components,))
    means = np.empty(x_t.shape[:-1] + (gmm.n_components, n_in))
    for k in range(gmm.n_components):
        h_cov = h @ covs[k]
        factor = robust_cholesky(h_cov @ h.T + noise, what=f"joint covariance {k}")
        centre = h @ gmm.means[k]
        log_terms[..., k] = np.log(gmm.weights[k]) + gaussian_logpdf(z, centre, factor)
        means[..., k, :] = gmm.means[k] + cholesky_solve(factor, z - centre) @ h_cov
    return log_terms, means


def exact_conditional_denoiser(gmm, op, sigma_y, y, path):
    """E[x_1 | x_t, y] by joint Gaussian conditioning on (x_t, y) per component.

    Returns
    -------
    Denoiser
        Native to ``path``; its vjp uses finite differences.
    """
    y = _check_inputs(gmm, op, sigma_y, y)
    a = op.to_dense()

    def evaluator(x_t, t):
        sched = path.schedule(t)
        log_terms, means = _joint_terms(gmm, a, sigma_y, sched.alpha, sched.sigma, x_t, y)
        resp = np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))
        return np.einsum("...k,...kd->...d", resp, means)

    return Denoiser(evaluator, path, name="conditional_oracle")


def exact_conditional_vf(gmm, op, sigma_y, y, path, t, x_t):
    """The exact conditional vector field v(x_t, y) at one time."""
    denoiser = exact_conditional_denoiser(gmm, op, sigma_y, y, path)
    return denoiser_to_vf(denoiser, path)(x_t, t)


def log_evidence(gmm, op, sigma_y, path, t, x_t, y):
    """log q(y | x_t) = log q(x_t, y) - log q(x_t)."""
    y = _check_inputs(gmm, op, sigma_y, y)
    sched = path.schedule(t)
    log_terms, _ = _joint_terms(gmm, op.to_dense(), sigma_y, sched.alpha, sched.sigma, x_t, y)
    return logsumexp(log_terms, axis=-1) - gmm_log_marginal(gmm, path, t, x_t)


def sample_conditional_xt(posterior, path, t, n, rng):
    """Draw n samples of x_t from the exact q(x_t | y)."""
    return path.sample_xt(posterior.sample(n, rng), t, rng)
