"""Gaussian-mixture priors and their exact denoisers.

The mixture q(x_1) = sum_k pi_k N(mu_k, Sigma_k) stands in for the data
distribution. Along an affine Gaussian path its marginal, posterior mean and
the Jacobian of that mean are all available in closed form.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from flowsolve.data_format.file_io import get_data_from_json
from flowsolve.model.denoisers import Denoiser
from flowsolve.utils.exceptions import ConfigurationError, SingularSystemError
from flowsolve.utils.linalg import cholesky_solve, gaussian_logpdf, robust_cholesky

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
PSD_JITTER = 1e-10


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """A validated Gaussian mixture.

    Exactly one of ``covariances`` (full (K, d, d) matrices) or ``isotropic``
    (per-component variances c_k for Sigma_k = c_k I) is given. The isotropic
    form takes a diagonal fast path everywhere.

    Parameters
    ----------
    weights : array (K,)
        Positive weights summing to 1 within 1e-12.
    means : array (K, d)
    covariances : array (K, d, d), optional
    isotropic : array (K,), optional
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray = None
    isotropic: np.ndarray = None

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if weights.ndim != 1 or means.ndim != 2 or means.shape[0] != weights.shape[0]:
            raise ConfigurationError(
                f"mixture weights {weights.shape} and means {means.shape} disagree on the component count"
            )
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ConfigurationError(
                f"mixture weights must be positive and sum to 1, got sum {weights.sum()!r}"
            )
        if (self.covariances is None) == (self.isotropic is None):
            raise ConfigurationError("give exactly one of full covariances or isotropic variances")

        n_comp, dim = means.shape
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        if self.isotropic is not None:
            iso = np.atleast_1d(np.asarray(self.isotropic, dtype=float))
            if iso.shape != (n_comp,) or np.any(iso < 0) or not np.all(np.isfinite(iso)):
                raise ConfigurationError(f"isotropic variances must be {n_comp} non-negative numbers")
            object.__setattr__(self, "isotropic", iso)
        else:
            cov = np.asarray(self.covariances, dtype=float)
            if cov.shape != (n_comp, dim, dim):
                raise ConfigurationError(f"covariances have shape {cov.shape}, expected {(n_comp, dim, dim)}")
            for k, sigma in enumerate(cov):
                scale = max(1.0, np.max(np.abs(sigma)))
                if np.max(np.abs(sigma - sigma.T)) > 1e-10 * scale:
                    raise ConfigurationError(f"covariance of component {k} is not symmetric")
                try:
                    linalg.cholesky(sigma + PSD_JITTER * np.eye(dim), lower=True)
                except linalg.LinAlgError as err:
                    raise ConfigurationError(
                        f"covariance of component {k} is not positive semi-definite"
                    ) from err
            object.__setattr__(self, "covariances", 0.5 * (cov + np.swapaxes(cov, 1, 2)))

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def is_isotropic(self):
        return self.isotropic is not None

    @property
    def is_standard_normal(self):
        """True for the single-component N(0, I) prior."""
        if self.n_components != 1 or np.any(self.means[0] != 0):
            return False
        return bool(np.all(self.covariance_matrices()[0] == np.eye(self.dim)))

    def covariance_matrices(self):
        """Dense (K, d, d) covariances, also for the isotropic form."""
        if self.is_isotropic:
            return self.isotropic[:, None, None] * np.eye(self.dim)[None]
        return self.covariances

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        """Covariance of the mixture, sum_k pi_k (Sigma_k + mu_k mu_k^T) - m m^T."""
        m = self.mean()
        second = np.einsum("k,kij->ij", self.weights, self.covariance_matrices())
        second += np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        return second - np.outer(m, m)

    def sample(self, n, rng):
        """Draw n samples, returned as an (n, d) array."""
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            sel = labels == k
            if not np.any(sel):
                continue
            if self.is_isotropic:
                out[sel] = self.means[k] + np.sqrt(self.isotropic[k]) * noise[sel]
            else:
                factor = robust_cholesky(self.covariances[k], what=f"covariance of component {k}")
                out[sel] = self.means[k] + noise[sel] @ factor.T
        return out

    @classmethod
    def standard_normal(cls, dim):
        return cls(weights=[1.0], means=np.zeros((1, dim)), isotropic=[1.0])

    @classmethod
    def from_dict(cls, spec):
        unknown = set(spec) - {"weights", "means", "covariances"}
        if unknown:
            raise ConfigurationError(f"unknown keys in mixture specification: {sorted(unknown)}")
        missing = {"weights", "means", "covariances"} - set(spec)
        if missing:
            raise ConfigurationError(f"mixture specification is missing {sorted(missing)}")
        cov = spec["covariances"]
        if isinstance(cov, dict):
            if set(cov) != {"isotropic"}:
                raise ConfigurationError(
                    "covariance block must be a list of matrices or {'isotropic': [...]}"
                )
            return cls(weights=spec["weights"], means=spec["means"], isotropic=cov["isotropic"])
        return cls(weights=spec["weights"], means=spec["means"], covariances=cov)

    def to_dict(self):
        cov = {"isotropic": self.isotropic.tolist()} if self.is_isotropic else self.covariances.tolist()
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covariances": cov}


def _component_terms(gmm, alpha, sigma, x_t):
    """Per-component quantities of the path marginal at one time.

    Returns log(pi_k N(x_t; alpha mu_k, C_k)), the posterior means m_k, the
    component scores s_k = -C_k^{-1}(x_t - alpha mu_k) and a function applying
    M_k^T = alpha C_k^{-1} Sigma_k to a cotangent (all with a component axis
    before the state axis).
    """
    x_t = np.asarray(x_t, dtype=float)
    diff = x_t[..., None, :] - alpha * gmm.means
    log_pi = np.log(gmm.weights)

    if gmm.is_isotropic:
        var = alpha**2 * gmm.isotropic + sigma**2
        if np.any(var <= 0.0):
            raise SingularSystemError(
                f"component marginal covariance is singular (alpha={alpha}, sigma={sigma})"
            )
        scores = -diff / var[:, None]
        maha = np.sum(diff * diff, axis=-1) / var
        logpdf = -0.5 * (gmm.dim * np.log(2.0 * np.pi * var) + maha)
        gain = alpha * gmm.isotropic / var
        post_means = gmm.means + gain[:, None] * diff

        def transpose_gain(cotangent):
            return gain[:, None] * cotangent[..., None, :]

        return log_pi + logpdf, post_means, scores, transpose_gain

    eye = np.eye(gmm.dim)
    factors = []
    logpdf = np.empty(diff.shape[:-1])
    scores = np.empty(diff.shape)
    post_means = np.empty(diff.shape)
    for k in range(gmm.n_components):
        factor = robust_cholesky(
            alpha**2 * gmm.covariances[k] + sigma**2 * eye, what=f"marginal covariance of component {k}"
        )
        factors.append(factor)
        sol = cholesky_solve(factor, diff[..., k, :])
        scores[..., k, :] = -sol
        logpdf[..., k] = gaussian_logpdf(x_t, alpha * gmm.means[k], factor)
        post_means[..., k, :] = gmm.means[k] + alpha * sol @ gmm.covariances[k]

    def transpose_gain(cotangent):
        out = np.empty(cotangent.shape[:-1] + (gmm.n_components, gmm.dim))
        for k, factor in enumerate(factors):
            out[..., k, :] = alpha * cholesky_solve(factor, cotangent @ gmm.covariances[k])
        return out

    return log_pi + logpdf, post_means, scores, transpose_gain


def _responsibilities(log_terms):
    return np.exp(log_terms - logsumexp(log_terms, axis=-1, keepdims=True))


def gmm_denoiser(gmm, path):
    """Exact posterior-mean denoiser E[x_1 | x_t] of a mixture prior on ``path``.

    The vjp is closed form:

        c^T J = sum_k w_k M_k^T c + sum_k w_k (c . m_k - c . x1_hat) s_k

    with M_k = alpha Sigma_k C_k^{-1} the per-component gain and s_k the
    per-component score.

    Parameters
    ----------
    gmm : GaussianMixture
    path : ProbPath

    Returns
    -------
    Denoiser
    """

    def evaluator(x_t, t):
        sched = path.schedule(t)
        log_terms, post_means, _, _ = _component_terms(gmm, sched.alpha, sched.sigma, x_t)
        resp = _responsibilities(log_terms)
        return np.einsum("...k,...kd->...d", resp, post_means)

    def vjp(x_t, t, cotangent):
        sched = path.schedule(t)
        log_terms, post_means, scores, transpose_gain = _component_terms(gmm, sched.alpha, sched.sigma, x_t)
        resp = _responsibilities(log_terms)
        cotangent = np.broadcast_to(cotangent, np.shape(x_t))
        x1_hat = np.einsum("...k,...kd->...d", resp, post_means)
        linear = np.einsum("...k,...kd->...d", resp, transpose_gain(cotangent))
        proj = np.einsum("...d,...kd->...k", cotangent, post_means) - np.sum(
            cotangent * x1_hat, axis=-1, keepdims=True
        )
        return linear + np.einsum("...k,...kd->...d", resp * proj, scores)

    return Denoiser(evaluator, path, vjp=vjp, name=f"gmm{gmm.n_components}")


def gmm_log_marginal(gmm, path, t, x_t):
    """log q(x_t) of the mixture marginal at time t, batched over leading axes."""
    sched = path.schedule(t)
    log_terms, _, _, _ = _component_terms(gmm, sched.alpha, sched.sigma, x_t)
    return logsumexp(log_terms, axis=-1)


def gmm_score(gmm, path, t, x_t):
    """Gradient of ``gmm_log_marginal`` with respect to x_t."""
    sched = path.schedule(t)
    log_terms, _, scores, _ = _component_terms(gmm, sched.alpha, sched.sigma, x_t)
    return np.einsum("...k,...kd->...d", _responsibilities(log_terms), scores)


def make_image_prior(shape, n_components=2, length_scale=3.0, amplitude=0.5, nugget=1e-2, seed=0):
    """Mixture of smooth-image Gaussians for image-shaped toy tasks.

    Each component has a squared-exponential covariance over pixel positions
    plus a small diagonal nugget. Component means are themselves smooth random
    fields drawn from the same kernel.

    Parameters
    ----------
    shape : tuple of int
        Image shape (H, W); the state is the row-major flattening.
    n_components : int
    length_scale : float
        Correlation length in pixels.
    amplitude : float
        Standard deviation of the smooth part.
    nugget : float
        Diagonal variance added for conditioning.
    seed : int

    Returns
    -------
    GaussianMixture
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) < 1:
        raise ConfigurationError(f"image prior needs a 2-D shape, got {shape}")
    if n_components < 1 or length_scale <= 0 or amplitude <= 0 or nugget <= 0:
        raise ConfigurationError("image prior needs n_components >= 1 and positive scales")
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(float)
    sq_dist = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    kernel = np.exp(-0.5 * sq_dist / length_scale**2)
    dim = coords.shape[0]

    rng = np.random.default_rng(seed)
    factor = robust_cholesky(kernel + 1e-8 * np.eye(dim), what="image kernel")
    fields = rng.standard_normal((n_components, dim)) @ factor.T
    offsets = np.linspace(-0.3, 0.3, n_components) if n_components > 1 else np.zeros(1)
    means = np.clip(0.4 * fields + offsets[:, None], -0.9, 0.9)

    scales = amplitude * np.linspace(1.0, 0.6, n_components)
    covariances = scales[:, None, None] ** 2 * kernel[None] + nugget * np.eye(dim)[None]
    weights = np.full(n_components, 1.0 / n_components)
    weights[-1] = 1.0 - weights[:-1].sum()
    logger.debug(f"image prior {shape} with {n_components} components")
    return GaussianMixture(weights=weights, means=means, covariances=covariances)


def load_gmm(source, base_dir=None):
    """Load a mixture from a JSON file, a parsed dict or an image-prior recipe.

    Parameters
    ----------
    source : str, dict or GaussianMixture
        A path to a JSON mixture file, a mixture dict,
        ``{"image_prior": {"shape": [H, W], ...}}`` or ``{"standard_normal": d}``.
    base_dir : str, optional
        Directory that relative paths are resolved against.

    Returns
    -------
    GaussianMixture
    """
    if isinstance(source, GaussianMixture):
        return source
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        if base_dir is not None and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        logger.info(f"Loading mixture prior from {path}")
        source = get_data_from_json(path)
    if not isinstance(source, dict):
        raise ConfigurationError(f"cannot build a mixture prior from {type(source).__name__}")
    for recipe in ("image_prior", "standard_normal"):
        if recipe in source and len(source) != 1:
            raise ConfigurationError(f"a {recipe} block cannot be mixed with other mixture keys")
    if "image_prior" in source:
        try:
            return make_image_prior(**source["image_prior"])
        except TypeError as err:
            raise ConfigurationError(f"bad image_prior parameters: {err}") from err
    if "standard_normal" in source:
        return GaussianMixture.standard_normal(int(source["standard_normal"]))
    return GaussianMixture.from_dict(source)
