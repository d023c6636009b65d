"""Affine Gaussian probability paths q(x_t | x_1) = N(alpha_t x_1, sigma_t^2 I).

Time runs forward everywhere in flowsolve: t = 0 is pure noise and t = 1 is
data. Diffusion schedules that are usually written in reversed time (VP, VE)
are re-expressed here once, so no other module deals with reversed indices.
"""

import abc
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.interpolate import PchipInterpolator

from flowsolve.utils.exceptions import ConfigurationError, DomainError, RangeUnattainableError

BISECT_XTOL = 1e-16
BISECT_RTOL = 4 * np.finfo(float).eps
BISECT_MAXITER = 200
POLISH_STEPS = 64


@dataclass(frozen=True)
class ScheduleSample:
    """Schedule values of a path at one time."""

    t: float
    alpha: float
    sigma: float
    dalpha_dt: float
    dsigma_dt: float

    @property
    def snr(self):
        if self.sigma == 0.0:
            return math.inf
        return self.alpha / self.sigma

    @property
    def dlog_snr_dt(self):
        """d ln(alpha_t / sigma_t) / dt, infinite where alpha or sigma vanishes."""
        if self.alpha == 0.0 or self.sigma == 0.0:
            return math.inf
        return self.dalpha_dt / self.alpha - self.dsigma_dt / self.sigma

    @property
    def dlog_sigma_dt(self):
        if self.sigma == 0.0:
            return -math.inf
        return self.dsigma_dt / self.sigma


def _closest_root(residual, t, t_max):
    """Walk from t over neighbouring floats to the one with the smallest |residual|.

    Near t = 1 the SNR of VP-like paths changes by a large relative amount per
    ulp of t, so the bisection bracket alone does not pin the root.
    """
    best, best_err = t, abs(residual(t))
    for limit in (0.0, t_max):
        cand = best
        for _ in range(POLISH_STEPS):
            prev, cand = cand, float(np.nextafter(cand, limit))
            if cand == prev:
                break
            err = abs(residual(cand))
            if not err < best_err:
                break
            best, best_err = cand, err
    return float(best)


class ProbPath(abc.ABC):
    """Base class of the affine Gaussian probability paths.

    A derived class provides ``kind``, a ``t_max`` attribute (largest time the
    schedule is defined for, normally 1) and ``_schedule(t)`` returning the tuple
    ``(alpha, sigma, dalpha_dt, dsigma_dt)``. alpha must be non-decreasing and
    sigma non-increasing in t.
    """

    kind = None

    @abc.abstractmethod
    def _schedule(self, t):
        pass

    def schedule(self, t):
        """Evaluate the schedule at time t.

        Parameters
        ----------
        t : float
            Time in [0, 1].

        Returns
        -------
        ScheduleSample

        Raises
        ------
        DomainError
            If t is not a finite number in [0, 1].
        """
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise DomainError(f"time t={t} is outside [0, 1]")
        alpha, sigma, dalpha, dsigma = self._schedule(t)
        return ScheduleSample(
            t=t, alpha=float(alpha), sigma=float(sigma), dalpha_dt=float(dalpha), dsigma_dt=float(dsigma)
        )

    def snr(self, t):
        """alpha_t / sigma_t; ``math.inf`` where sigma_t = 0."""
        return self.schedule(t).snr

    def attainable_snr(self):
        """The SNR range ``(snr(0), snr(t_max))`` the path can represent."""
        return self.snr(0.0), self.snr(self.t_max)

    def inverse_snr(self, s):
        """Time t with snr(t) = s.

        Closed forms are used where a path defines ``_inverse_snr``; otherwise the
        root is bracketed on [0, t_max] and found by bisection, which is safe
        because the SNR is monotone.

        Raises
        ------
        RangeUnattainableError
            If s is outside ``attainable_snr()``.
        """
        s = float(s)
        lo, hi = self.attainable_snr()
        if math.isnan(s) or s < lo * (1.0 - 1e-12) or s > hi * (1.0 + 1e-12):
            raise RangeUnattainableError(s, (lo, hi))
        if s <= lo:
            return 0.0
        if s >= hi:
            return float(self.t_max)
        closed = self._inverse_snr(s)
        if closed is not None:
            return closed

        def residual(t):
            return self.snr(t) - s

        t = optimize.bisect(
            residual, 0.0, self.t_max, xtol=BISECT_XTOL, rtol=BISECT_RTOL, maxiter=BISECT_MAXITER
        )
        return _closest_root(residual, t, self.t_max)

    def _inverse_snr(self, s):
        return None

    def sample_xt(self, x1, t, rng):
        """Draw x_t ~ N(alpha_t x1, sigma_t^2 I).

        Parameters
        ----------
        x1 : numpy array
            Clean sample(s), state on the last axis.
        t : float
            Time in [0, 1].
        rng : numpy.random.Generator
            Caller-owned generator.
        """
        x1 = np.asarray(x1, dtype=float)
        sched = self.schedule(t)
        return sched.alpha * x1 + sched.sigma * rng.standard_normal(x1.shape)

    def to_dict(self):
        raise ConfigurationError(f"{type(self).__name__} cannot be serialized")


@dataclass(frozen=True)
class CondOTPath(ProbPath):
    """Conditional optimal-transport path, alpha_t = t and sigma_t = 1 - t."""

    kind = "cond_ot"
    t_max: float = field(default=1.0, init=False)

    def _schedule(self, t):
        return t, 1.0 - t, 1.0, -1.0

    def _inverse_snr(self, s):
        if math.isinf(s):
            return 1.0
        return s / (1.0 + s)

    def to_dict(self):
        return {"kind": self.kind, "params": {}}


@dataclass(frozen=True)
class VPPath(ProbPath):
    """Variance-preserving path with the linear noise schedule of the VP-SDE.

    alpha_t = exp(-T(1 - t) / 2) with T(s) = beta_min s + (beta_max - beta_min) s^2 / 2
    and sigma_t = sqrt(1 - alpha_t^2).

    Parameters
    ----------
    beta_min, beta_max : float
        Endpoints of the linear noise scale beta(s).
    t_max : float
        Largest forward time the model was trained to. Models trained on a
        truncated range have a finite maximum SNR, snr(t_max).
    """

    kind = "vp"
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1.0

    def __post_init__(self):
        if self.beta_min < 0 or self.beta_max < self.beta_min or self.beta_max <= 0:
            raise ConfigurationError(
                f"invalid VP schedule beta_min={self.beta_min}, beta_max={self.beta_max}"
            )
        if not (0.0 < self.t_max <= 1.0):
            raise ConfigurationError(f"VP t_max={self.t_max} must lie in (0, 1]")

    def integrated_beta(self, s):
        """T(s), the integral of beta over [0, s]."""
        return self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s**2

    def beta(self, s):
        return self.beta_min + (self.beta_max - self.beta_min) * s

    def _schedule(self, t):
        s = 1.0 - t
        big_t = self.integrated_beta(s)
        alpha = math.exp(-0.5 * big_t)
        sigma = math.sqrt(-math.expm1(-big_t))
        dalpha = 0.5 * self.beta(s) * alpha
        dsigma = -math.inf if sigma == 0.0 else -alpha * dalpha / sigma
        return alpha, sigma, dalpha, dsigma

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": {"beta_min": self.beta_min, "beta_max": self.beta_max, "t_max": self.t_max},
        }


@dataclass(frozen=True)
class VEPath(ProbPath):
    """Variance-exploding path, alpha_t = 1 and sigma_t = sigma_min (sigma_max / sigma_min)^(1 - t).

    Both SNR endpoints are finite: [1 / sigma_max, 1 / sigma_min].
    """

    kind = "ve"
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    t_max: float = field(default=1.0, init=False)

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ConfigurationError(
                f"invalid VE schedule sigma_min={self.sigma_min}, sigma_max={self.sigma_max}"
            )

    def _schedule(self, t):
        log_ratio = math.log(self.sigma_max / self.sigma_min)
        sigma = self.sigma_min * math.exp(log_ratio * (1.0 - t))
        return 1.0, sigma, 0.0, -sigma * log_ratio

    def _inverse_snr(self, s):
        log_ratio = math.log(self.sigma_max / self.sigma_min)
        return 1.0 - math.log(1.0 / (s * self.sigma_min)) / log_ratio

    def to_dict(self):
        return {"kind": self.kind, "params": {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max}}


@dataclass(frozen=True)
class CustomPath(ProbPath):
    """A path given by closed-form callables for alpha, sigma and their derivatives."""

    kind = "custom"
    alpha_fn: Callable = None
    sigma_fn: Callable = None
    dalpha_fn: Callable = None
    dsigma_fn: Callable = None
    t_max: float = 1.0

    def __post_init__(self):
        if None in (self.alpha_fn, self.sigma_fn, self.dalpha_fn, self.dsigma_fn):
            raise ConfigurationError("a custom path needs alpha, sigma and both derivatives")

    def _schedule(self, t):
        return self.alpha_fn(t), self.sigma_fn(t), self.dalpha_fn(t), self.dsigma_fn(t)

    @classmethod
    def from_table(cls, ts, alphas, sigmas):
        """Build a path from tabulated values with monotone PCHIP interpolation.

        Parameters
        ----------
        ts : array
            Increasing times covering [0, 1].
        alphas, sigmas : array
            Non-decreasing alpha and non-increasing sigma at ``ts``.
        """
        ts = np.asarray(ts, dtype=float)
        alphas = np.asarray(alphas, dtype=float)
        sigmas = np.asarray(sigmas, dtype=float)
        if ts[0] > 0.0 or ts[-1] < 1.0 or np.any(np.diff(ts) <= 0):
            raise ConfigurationError("tabulated times must increase and cover [0, 1]")
        if np.any(np.diff(alphas) < 0) or np.any(np.diff(sigmas) > 0) or alphas.min() < 0 or sigmas.min() < 0:
            raise ConfigurationError("tabulated alpha must be non-decreasing and sigma non-increasing")
        alpha = PchipInterpolator(ts, alphas)
        sigma = PchipInterpolator(ts, sigmas)
        dalpha, dsigma = alpha.derivative(), sigma.derivative()
        return cls(
            alpha_fn=lambda t: float(alpha(t)),
            sigma_fn=lambda t: float(sigma(t)),
            dalpha_fn=lambda t: float(dalpha(t)),
            dsigma_fn=lambda t: float(dsigma(t)),
        )


PATH_KINDS = {"cond_ot": CondOTPath, "vp": VPPath, "ve": VEPath}


def path_from_dict(spec):
    """Build a path from its run-config block ``{"kind": ..., "params": {...}}``."""
    unknown = set(spec) - {"kind", "params"}
    if unknown:
        raise ConfigurationError(f"unknown keys in path block: {sorted(unknown)}")
    kind = spec.get("kind")
    if kind not in PATH_KINDS:
        raise ConfigurationError(f"unknown path kind {kind!r}, expected one of {sorted(PATH_KINDS)}")
    params = dict(spec.get("params", {}))
    try:
        return PATH_KINDS[kind](**params)
    except TypeError as err:
        raise ConfigurationError(f"bad parameters for path {kind!r}: {err}") from err


def feasible_window(target, native):
    """Times on ``target`` whose SNR the ``native`` path can reach.

    Returns
    -------
    tuple(float, float) or None
        The closed interval of usable target times, or None if no time works.
    """
    native_lo, native_hi = native.attainable_snr()
    target_lo, target_hi = target.attainable_snr()
    if native_lo > target_hi or native_hi < target_lo:
        return None
    t_lo = 0.0 if target_lo >= native_lo else target.inverse_snr(native_lo)
    t_hi = target.t_max if target_hi <= native_hi else target.inverse_snr(native_hi)
    return t_lo, t_hi
