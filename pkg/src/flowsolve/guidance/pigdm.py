"""Pseudo-inverse guidance for flow-based linear inverse problems.

The posterior q(x_1 | x_t) is approximated by N(x1_hat, r_t^2 I). This gives a
Gaussian likelihood q(y | x_t) whose gradient, pulled back through the
denoiser Jacobian, corrects the unconditional vector field:

    v_corrected = v + gamma_t sigma_t^2 (d ln(alpha_t / sigma_t) / dt) g,
    g = (y - A x1_hat)^T (r_t^2 A A^T + sigma_y^2 I)^{-1} A d x1_hat / d x_t.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from flowsolve.paths.schedules import CondOTPath
from flowsolve.utils.exceptions import ConfigurationError, DomainError, SingularityError


class Rt2Rule(str, enum.Enum):
    """Variance of the Gaussian approximation to q(x_1 | x_t)."""

    FLOW = "flow"
    VP_NATIVE = "vp_native"
    VP_VIA_VE = "vp_via_ve"


class GammaRule(str, enum.Enum):
    """Adaptive weight multiplying the correction. ``DISABLED`` switches guidance off."""

    UNADAPTIVE = "unadaptive"
    VP_ADAPTIVE = "vp_adaptive"
    DISABLED = "disabled"


def _coerce(enum_cls, value, what):
    try:
        return enum_cls(value)
    except ValueError as err:
        choices = [m.value for m in enum_cls]
        raise ConfigurationError(f"unknown {what} {value!r}, expected one of {choices}") from err


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance settings of a run.

    ``null_range`` replaces the range-space part of every denoiser output by
    A^+ y and is only meaningful for noiseless observations.
    """

    rt2_rule: Rt2Rule = Rt2Rule.FLOW
    gamma_rule: GammaRule = GammaRule.UNADAPTIVE
    sigma_y: float = 0.0
    null_range: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rt2_rule", _coerce(Rt2Rule, self.rt2_rule, "rt2 rule"))
        object.__setattr__(self, "gamma_rule", _coerce(GammaRule, self.gamma_rule, "gamma rule"))
        sigma_y = float(self.sigma_y)
        if not math.isfinite(sigma_y) or sigma_y < 0:
            raise ConfigurationError(f"sigma_y must be a finite non-negative number, got {self.sigma_y}")
        object.__setattr__(self, "sigma_y", sigma_y)
        if not isinstance(self.null_range, bool):
            raise ConfigurationError(f"null_range must be a boolean, got {self.null_range!r}")
        if self.null_range and sigma_y != 0.0:
            raise ConfigurationError("null_range guidance requires noiseless observations (sigma_y = 0)")

    KEYS = ("rt2", "gamma", "sigma_y", "null_range")

    @classmethod
    def from_dict(cls, spec):
        unknown = set(spec) - set(cls.KEYS)
        if unknown:
            raise ConfigurationError(f"unknown keys in guidance block: {sorted(unknown)}")
        return cls(
            rt2_rule=spec.get("rt2", Rt2Rule.FLOW.value),
            gamma_rule=spec.get("gamma", GammaRule.UNADAPTIVE.value),
            sigma_y=spec.get("sigma_y", 0.0),
            null_range=spec.get("null_range", False),
        )

    def to_dict(self):
        return {
            "rt2": self.rt2_rule.value,
            "gamma": self.gamma_rule.value,
            "sigma_y": self.sigma_y,
            "null_range": self.null_range,
        }


def rt2(rule, path, t):
    """r_t^2 under ``rule`` at time t.

    ``FLOW`` is sigma^2 / (sigma^2 + alpha^2), valid on any affine path.
    ``VP_NATIVE`` is 1 - alpha^2, which coincides with ``FLOW`` on VP paths.
    ``VP_VIA_VE`` is (1 - alpha^2) / (2 - alpha^2), the value obtained by
    running a VP model through the VE parameterization.
    """
    rule = Rt2Rule(rule)
    sched = path.schedule(t)
    alpha2, sigma2 = sched.alpha**2, sched.sigma**2
    if alpha2 + sigma2 == 0.0:
        raise DomainError(f"alpha_t = sigma_t = 0 at t={sched.t}")
    if rule is Rt2Rule.FLOW:
        return sigma2 / (sigma2 + alpha2)
    if rule is Rt2Rule.VP_NATIVE:
        return 1.0 - alpha2
    return (1.0 - alpha2) / (2.0 - alpha2)


def gamma(rule, path, t):
    rule = GammaRule(rule)
    if rule is GammaRule.UNADAPTIVE:
        return 1.0
    if rule is GammaRule.DISABLED:
        return 0.0
    sched = path.schedule(t)
    return math.sqrt(sched.alpha / (sched.alpha**2 + sched.sigma**2))


def correction_coefficient(path, t):
    """sigma_t^2 d ln(alpha_t / sigma_t) / dt, which is (1 - t) / t on the OT path.

    Raises
    ------
    SingularityError
        Where alpha_t = 0 and the coefficient is infinite.
    """
    sched = path.schedule(t)
    if sched.alpha == 0.0:
        raise SingularityError(sched.t, f"alpha_t = 0 at t={sched.t:.6g}; the correction is unbounded")
    if isinstance(path, CondOTPath):
        return (1.0 - sched.t) / sched.t
    return sched.sigma**2 * sched.dalpha_dt / sched.alpha - sched.sigma * sched.dsigma_dt


def pigdm_g(op, y, x1_hat, vjp, r2, sigma_y, on_rank_deficiency=None):
    """The guidance vector g.

    Computed as one transpose-apply, one Gram solve and exactly one call of
    ``vjp``.

    Parameters
    ----------
    op : LinearOperator
    y : numpy array
        Observation(s).
    x1_hat : numpy array
        Denoiser output(s) at the current state.
    vjp : function
        ``vjp(cotangent)`` for the current state and time.
    r2 : float
    sigma_y : float
    on_rank_deficiency : function, optional
        Forwarded to ``LinearOperator.solve_gram``.

    Returns
    -------
    numpy array
        Same shape as x1_hat.
    """
    residual = np.asarray(y, dtype=float) - op.apply(x1_hat)
    weighted = op.solve_gram(r2, sigma_y**2, residual, on_rank_deficiency=on_rank_deficiency)
    return vjp(op.apply_transpose(weighted))


def correct_vf(v, g, path, t, gamma_rule):
    """Add the weighted correction to an unconditional vector field."""
    weight = gamma(gamma_rule, path, t)
    if weight == 0.0:
        return np.asarray(v, dtype=float)
    return v + weight * correction_coefficient(path, t) * g


def null_range_combine(op, y, x1_hat):
    """A^+ y + (I - A^+ A) x1_hat."""
    return op.pinv_apply(y) + x1_hat - op.row_space_projection(x1_hat)


def null_space_cotangent(op, cotangent):
    """(I - A^+ A) c, the cotangent pulled back through ``null_range_combine``."""
    return cotangent - op.row_space_projection(cotangent)
