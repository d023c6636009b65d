"""Exceptions and warnings raised by flowsolve.

Every exception derives from the builtin a caller would otherwise catch, so
``except ValueError`` keeps working for configuration and domain problems.
"""

import numpy as np


class DomainError(ValueError):
    """A time or schedule value lies outside the domain of an operation."""


class RangeUnattainableError(ValueError):
    """A signal-to-noise ratio cannot be reached by a probability path.

    Parameters
    ----------
    snr : float
        The requested signal-to-noise ratio.
    bounds : tuple(float, float)
        The attainable ``(snr_min, snr_max)`` of the path that was asked.
    window : tuple(float, float), optional
        The interval of times on the sampling path whose SNR is attainable, when
        the error was raised while retiming a model onto another path.
    """

    def __init__(self, snr, bounds, window=None, message=None):
        self.snr = snr
        self.bounds = tuple(bounds)
        self.window = None if window is None else tuple(window)
        if message is None:
            message = f"SNR {snr:.6g} is outside the attainable range [{bounds[0]:.6g}, {bounds[1]:.6g}]"
            if window is not None:
                message += f"; usable sampling times are [{window[0]:.6g}, {window[1]:.6g}]"
        super().__init__(message)


class SingularityError(ArithmeticError):
    """A conversion coefficient is zero or infinite at the requested time."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"conversion is singular at t={t:.6g}")


class ShapeMismatchError(ValueError):
    """Array shapes do not match what an operator expects."""

    def __init__(self, expected, got, what="input"):
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{what} shape mismatch: expected {self.expected}, got {self.got}")


class SingularSystemError(np.linalg.LinAlgError):
    """A linear system is singular and no regularization applies."""


class ConfigurationError(ValueError):
    """A run configuration is invalid or internally inconsistent."""


class InfeasibleGridError(ConfigurationError):
    """Some times of a solver grid cannot be retimed onto the model's path.

    Parameters
    ----------
    failures : list[float]
        Grid times whose SNR the model's native path cannot reach.
    window : tuple(float, float) or None
        Usable sampling times, None when no time is usable.
    """

    def __init__(self, failures, window):
        self.failures = list(failures)
        self.window = window
        if window is None:
            detail = "no sampling time is reachable by the model's path"
        else:
            detail = (
                f"the minimum feasible t0 is {window[0]:.6g} "
                f"and the maximum feasible end time is {window[1]:.6g}"
            )
        super().__init__(
            f"{len(self.failures)} grid time(s) in [{min(self.failures):.6g}, {max(self.failures):.6g}] "
            f"cannot be retimed; {detail}"
        )


class DivergenceError(FloatingPointError):
    """The ODE state became non-finite.

    Parameters
    ----------
    step : int
        Index of the Euler step that produced the non-finite state.
    diagnostics : list[dict]
        Per-step diagnostics recorded up to and including ``step``.
    """

    def __init__(self, step, diagnostics):
        self.step = step
        self.diagnostics = list(diagnostics)
        t = self.diagnostics[-1]["t"] if self.diagnostics else float("nan")
        super().__init__(f"non-finite state at step {step} (t={t:.6g})")


class FormatError(ValueError):
    """A file header could not be parsed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class RankDeficiencyWarning(RuntimeWarning):
    """A noiseless Gram system was rank deficient and was solved on the range of A."""
