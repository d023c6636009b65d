"""Pretrained-model parameterizations and the exact conversions between them.

A model is either a denoiser x1_hat(x_t, t) = E[x_1 | x_t] or a vector field
v(x_t, t). For an affine Gaussian path the two are related by

    v = (alpha_t d ln(alpha_t / sigma_t) / dt) x1_hat + (d ln sigma_t / dt) x_t,

and a denoiser trained on one path can be evaluated on another by matching
signal-to-noise ratios. All evaluators take the state on the last axis and
accept any number of leading batch axes.
"""

import functools
import logging

import numpy as np

from flowsolve.paths.schedules import CondOTPath, feasible_window
from flowsolve.utils.exceptions import RangeUnattainableError, SingularityError

logger = logging.getLogger(__name__)


def finite_difference_vjp(evaluator, rel_step=1e-4):
    """Central-difference vector-Jacobian product of an evaluator.

    The step for a state x is ``rel_step * (1 + max|x|)``. Each call costs two
    evaluations per state coordinate.

    Parameters
    ----------
    evaluator : function
        ``evaluator(x_t, t) -> array`` with the same trailing size as x_t.
    rel_step : float
        Relative finite-difference step.

    Returns
    -------
    function
        ``vjp(x_t, t, cotangent) -> array`` computing cotangent^T d evaluator / d x_t.
    """

    def vjp(x_t, t, cotangent):
        x_t = np.asarray(x_t, dtype=float)
        cotangent = np.asarray(cotangent, dtype=float)
        step = rel_step * (1.0 + np.max(np.abs(x_t), axis=-1, keepdims=True))
        out = np.empty(np.broadcast_shapes(x_t.shape, cotangent.shape))
        for j in range(x_t.shape[-1]):
            shift = np.zeros_like(x_t)
            shift[..., j] = step[..., 0]
            plus = np.sum(cotangent * evaluator(x_t + shift, t), axis=-1)
            minus = np.sum(cotangent * evaluator(x_t - shift, t), axis=-1)
            out[..., j] = (plus - minus) / (2.0 * step[..., 0])
        return out

    return vjp


class Denoiser:
    """A denoiser x1_hat(x_t, t) together with its vector-Jacobian product.

    Parameters
    ----------
    evaluator : function
        ``evaluator(x_t, t) -> x1_hat``.
    native_path : ProbPath
        The probability path the denoiser was built (trained) for.
    vjp : function, optional
        ``vjp(x_t, t, cotangent) -> cotangent^T d x1_hat / d x_t``. A
        finite-difference fallback is used when omitted.
    name : str, optional
        Label used in log messages.
    """

    def __init__(self, evaluator, native_path, vjp=None, name="denoiser"):
        self.evaluator = evaluator
        self.native_path = native_path
        self.has_analytic_vjp = vjp is not None
        self._vjp = vjp if vjp is not None else finite_difference_vjp(evaluator)
        self.name = name

    def __call__(self, x_t, t):
        return self.evaluator(np.asarray(x_t, dtype=float), float(t))

    def vjp(self, x_t, t, cotangent):
        return self._vjp(np.asarray(x_t, dtype=float), float(t), np.asarray(cotangent, dtype=float))

    def __repr__(self):
        return f"Denoiser({self.name!r}, native_path={self.native_path!r})"


class VectorFieldModel:
    """A vector field v(x_t, t) on its native path, with an optional vjp."""

    def __init__(self, evaluator, native_path, vjp=None, name="vector_field"):
        self.evaluator = evaluator
        self.native_path = native_path
        self._vjp = vjp
        self.name = name

    @property
    def has_vjp(self):
        return self._vjp is not None

    def __call__(self, x_t, t):
        return self.evaluator(np.asarray(x_t, dtype=float), float(t))

    def vjp(self, x_t, t, cotangent):
        if self._vjp is None:
            raise NotImplementedError(f"{self.name} has no vector-Jacobian product")
        return self._vjp(np.asarray(x_t, dtype=float), float(t), np.asarray(cotangent, dtype=float))

    def __repr__(self):
        return f"VectorFieldModel({self.name!r}, native_path={self.native_path!r})"


def vf_coefficients(path, t):
    """Coefficients (a_t, b_t) of v = a_t x1_hat + b_t x_t.

    a_t = alpha_t d ln(alpha_t / sigma_t) / dt and b_t = d ln sigma_t / dt. For
    the conditional OT path these are 1 / (1 - t) and -1 / (1 - t).

    Raises
    ------
    SingularityError
        Where sigma_t = 0, e.g. t = 1 on the conditional OT path.
    """
    sched = path.schedule(t)
    if sched.sigma == 0.0:
        raise SingularityError(sched.t, f"sigma_t = 0 at t={sched.t:.6g}; the vector field is singular")
    if isinstance(path, CondOTPath):
        inv = 1.0 / (1.0 - sched.t)
        return inv, -inv
    a = sched.dalpha_dt - sched.alpha * sched.dsigma_dt / sched.sigma
    b = sched.dsigma_dt / sched.sigma
    return a, b


def vf_from_x1_hat(path, t, x_t, x1_hat):
    """Vector field from a denoiser output under ``path`` at time t."""
    x_t = np.asarray(x_t, dtype=float)
    x1_hat = np.asarray(x1_hat, dtype=float)
    if isinstance(path, CondOTPath):
        if t >= 1.0:
            raise SingularityError(t, f"sigma_t = 0 at t={t:.6g}; the vector field is singular")
        return (x1_hat - x_t) / (1.0 - t)
    a, b = vf_coefficients(path, t)
    return a * x1_hat + b * x_t


def x1_hat_from_vf(path, t, x_t, v):
    """Denoiser output from a vector field under ``path`` at time t.

    Raises
    ------
    SingularityError
        If alpha_t = 0 or sigma_t = 0, where the linear relation cannot be inverted.
    """
    sched = path.schedule(t)
    if sched.alpha == 0.0:
        raise SingularityError(sched.t, f"alpha_t = 0 at t={sched.t:.6g}; cannot recover x1_hat")
    a, b = vf_coefficients(path, t)
    if a == 0.0 or not np.isfinite(a):
        raise SingularityError(sched.t)
    return (np.asarray(v, dtype=float) - b * np.asarray(x_t, dtype=float)) / a


def retime(denoiser, target_path):
    """Evaluate a denoiser built for one path on another path.

    At target time t the native time is t' = SNR_native^{-1}(SNR_target(t)) and the
    input is rescaled by alpha'_{t'} / alpha_t. The vjp carries the same factor.

    Parameters
    ----------
    denoiser : Denoiser
    target_path : ProbPath

    Returns
    -------
    Denoiser
        The same object when the paths coincide, otherwise a new denoiser whose
        ``native_path`` is ``target_path``. Unattainable times raise
        ``RangeUnattainableError`` carrying the usable window on ``target_path``.
    """
    native = denoiser.native_path
    if target_path == native:
        return denoiser

    @functools.lru_cache(maxsize=4096)
    def time_map(t):
        target = target_path.schedule(t)
        try:
            t_native = native.inverse_snr(target.snr)
        except RangeUnattainableError as err:
            window = feasible_window(target_path, native)
            raise RangeUnattainableError(err.snr, err.bounds, window=window or (np.nan, np.nan)) from err
        alpha_native = native.schedule(t_native).alpha
        if target.alpha == 0.0:
            scale = 1.0
        else:
            scale = alpha_native / target.alpha
        return t_native, scale

    def evaluator(x_t, t):
        t_native, scale = time_map(t)
        return denoiser(scale * x_t, t_native)

    def vjp(x_t, t, cotangent):
        t_native, scale = time_map(t)
        return scale * denoiser.vjp(scale * x_t, t_native, cotangent)

    retimed = Denoiser(evaluator, target_path, vjp=vjp, name=f"{denoiser.name}@{target_path.kind}")
    retimed.has_analytic_vjp = denoiser.has_analytic_vjp
    retimed.time_map = time_map
    return retimed


def denoiser_to_vf(denoiser, path):
    """Convert a denoiser into the vector field of ``path``, retiming if needed."""
    denoiser = retime(denoiser, path)

    def evaluator(x_t, t):
        return vf_from_x1_hat(path, t, x_t, denoiser(x_t, t))

    def vjp(x_t, t, cotangent):
        a, b = vf_coefficients(path, t)
        return a * denoiser.vjp(x_t, t, cotangent) + b * cotangent

    return VectorFieldModel(evaluator, path, vjp=vjp, name=f"vf({denoiser.name})")


def vf_to_denoiser(model, path):
    """Convert a vector-field model into a denoiser on ``path``.

    The conversion happens on the model's native path; the resulting denoiser is
    retimed onto ``path`` when the two differ. Without a model vjp, the
    denoiser falls back to finite differences.
    """
    native = model.native_path

    def evaluator(x_t, t):
        return x1_hat_from_vf(native, t, x_t, model(x_t, t))

    vjp = None
    if model.has_vjp:

        def vjp(x_t, t, cotangent):
            a, b = vf_coefficients(native, t)
            return (model.vjp(x_t, t, cotangent) - b * cotangent) / a

    denoiser = Denoiser(evaluator, native, vjp=vjp, name=f"x1({model.name})")
    return retime(denoiser, path)
