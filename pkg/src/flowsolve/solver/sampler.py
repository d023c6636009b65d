"""Training-free solver for linear inverse problems with a pretrained flow.

Starting from x_{t0} = alpha_{t0} y_lift + sigma_{t0} eps, the corrected vector
field is integrated with fixed-step Euler on a uniform grid up to
1 - end_epsilon, where the denoiser output is read out as the final sample.
Denoisers are used directly; vector-field models are converted to denoisers
first. Models trained on another path are retimed by SNR matching.
"""

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from flowsolve.guidance import pigdm
from flowsolve.guidance.pigdm import GuidanceConfig
from flowsolve.model.denoisers import Denoiser, VectorFieldModel, retime, vf_from_x1_hat, vf_to_denoiser
from flowsolve.operators.linear_operators import upsample_nearest
from flowsolve.paths.schedules import feasible_window
from flowsolve.utils.exceptions import (
    ConfigurationError,
    DivergenceError,
    InfeasibleGridError,
    RangeUnattainableError,
    ShapeMismatchError,
)
from flowsolve.utils.rng import run_rng

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ["step", "t", "residual_norm", "g_norm", "coeff", "r2", "gamma"]


class InitMode(str, enum.Enum):
    Y = "y"
    PINV = "pinv"


class Lift(str, enum.Enum):
    """How the observation is mapped into state space for ``InitMode.Y``."""

    IDENTITY = "identity"
    NEAREST = "nearest"
    PINV = "pinv"


@dataclass(frozen=True, eq=False)
class SolveRun:
    """Everything that determines one solve.

    Parameters
    ----------
    path : ProbPath
        The path the sampler integrates on.
    model : Denoiser or VectorFieldModel
        The pretrained model; its ``native_path`` may differ from ``path``.
    operator : LinearOperator
    y : numpy array
        Observation (n_out,), or (n_runs, n_out) for one observation per run.
    guidance : GuidanceConfig
    t0 : float
        Start time in (0, 1 - end_epsilon).
    n_steps : int
    init_mode : InitMode
    lift : Lift
    seed : int
    end_epsilon : float
    record_trajectory : bool
    """

    path: object
    model: object
    operator: object
    y: np.ndarray
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    t0: float = 0.2
    n_steps: int = 100
    init_mode: InitMode = InitMode.Y
    lift: Lift = Lift.IDENTITY
    seed: int = 0
    end_epsilon: float = 1e-3
    record_trajectory: bool = False

    def __post_init__(self):
        if not isinstance(self.model, (Denoiser, VectorFieldModel)):
            raise ConfigurationError(
                f"model must be a Denoiser or VectorFieldModel, got {type(self.model).__name__}"
            )
        y = np.array(self.y, dtype=float)
        if y.ndim not in (1, 2) or y.shape[-1] != self.operator.n_out:
            raise ShapeMismatchError((self.operator.n_out,), y.shape, what="observation")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        try:
            object.__setattr__(self, "init_mode", InitMode(self.init_mode))
            object.__setattr__(self, "lift", Lift(self.lift))
        except ValueError as err:
            raise ConfigurationError(str(err)) from err
        if not (0.0 < self.end_epsilon < 1.0):
            raise ConfigurationError(f"end_epsilon={self.end_epsilon} must lie in (0, 1)")
        if not (0.0 < self.t0 < 1.0 - self.end_epsilon):
            raise ConfigurationError(
                f"t0={self.t0} must lie in (0, 1 - end_epsilon = {1.0 - self.end_epsilon})"
            )
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def t_end(self):
        return 1.0 - self.end_epsilon


@dataclass
class SolveResult:
    """Output of ``solve``/``integrate``.

    ``x1`` has shape (n_in,) for a single run and (n_runs, n_in) for a batch.
    Diagnostic norms are per run, so they are arrays for batches.
    """

    x1: np.ndarray
    diagnostics: list
    trajectory: tuple = None
    warnings: list = field(default_factory=list)
    nfe: int = 0
    vjp_evaluations: int = 0
    readout_evaluations: int = 0
    wall_time: float = math.nan

    def diagnostics_frame(self, run_index=None):
        """Per-step diagnostics as a DataFrame, for one run of a batch if asked."""
        rows = []
        for record in self.diagnostics:
            row = dict(record)
            for key in ("residual_norm", "g_norm"):
                value = np.asarray(row[key])
                row[key] = float(value if value.ndim == 0 else value[run_index or 0])
            rows.append(row)
        return pd.DataFrame(rows, columns=DIAGNOSTIC_COLUMNS)


def time_grid(run):
    """Uniform grid t_k = t0 + k (1 - end_epsilon - t0) / n_steps, k = 0..n_steps."""
    h = (run.t_end - run.t0) / run.n_steps
    grid = run.t0 + h * np.arange(run.n_steps + 1)
    grid[-1] = run.t_end
    return grid


def validate_grid(run):
    """Retimed native time at every grid time.

    Returns
    -------
    list of (float, float)
        Pairs (t, t') with t' the native-path time matched to t.

    Raises
    ------
    InfeasibleGridError
        If any grid time is unattainable, naming the feasible window.
    """
    native = run.model.native_path
    grid = time_grid(run)
    if native == run.path:
        return [(float(t), float(t)) for t in grid]
    pairs, failures = [], []
    for t in grid:
        try:
            pairs.append((float(t), native.inverse_snr(run.path.snr(t))))
        except RangeUnattainableError:
            failures.append(float(t))
    if failures:
        raise InfeasibleGridError(failures, feasible_window(run.path, native))
    return pairs


def resolve_denoiser(run):
    """The denoiser the solver evaluates, on ``run.path``."""
    if isinstance(run.model, VectorFieldModel):
        return vf_to_denoiser(run.model, run.path)
    return retime(run.model, run.path)


def lift_observation(run):
    """The observation mapped into state space for initialization."""
    op = run.operator
    if run.init_mode is InitMode.PINV or run.lift is Lift.PINV:
        return op.pinv_apply(run.y)
    if run.lift is Lift.NEAREST:
        return upsample_nearest(op, run.y)
    if op.n_out != op.n_in:
        raise ConfigurationError(
            f"identity lift needs a square operator, got shape {op.shape}; use the 'nearest' or 'pinv' lift"
        )
    return np.array(run.y)


def initialize(run, rng=None, n_runs=None):
    """Draw x_{t0} = alpha_{t0} y_lift + sigma_{t0} eps.

    Parameters
    ----------
    run : SolveRun
    rng : numpy.random.Generator, optional
        Source of all noise. When omitted, run i of the batch uses its own
        generator derived from ``(run.seed, i)``, so a run's noise does not
        depend on the batch it is part of.
    n_runs : int, optional
        Batch size; a single state of shape (n_in,) is drawn when omitted.
    """
    lifted = lift_observation(run)
    sched = run.path.schedule(run.t0)
    n_in = run.operator.n_in
    if n_runs is None and run.y.ndim == 2:
        n_runs = run.y.shape[0]
    if rng is not None:
        shape = (n_in,) if n_runs is None else (n_runs, n_in)
        noise = rng.standard_normal(shape)
    elif n_runs is None:
        noise = run_rng(run.seed, 0).standard_normal(n_in)
    else:
        noise = np.stack([run_rng(run.seed, i).standard_normal(n_in) for i in range(n_runs)])
    return sched.alpha * lifted + sched.sigma * noise


def _norm(x):
    return np.linalg.norm(x, axis=-1)


class GuidedField(NamedTuple):
    """One evaluation of the corrected vector field."""

    x1_hat: np.ndarray
    g: np.ndarray
    v: np.ndarray
    r2: float
    gamma: float
    coeff: float


def guided_field(run, denoiser, x, t, on_rank_deficiency=None):
    """Corrected vector field at ``(x, t)`` with the guidance of ``run``.

    The denoiser is evaluated once; its vjp is taken only when the guidance
    weight at ``t`` is non-zero.

    Parameters
    ----------
    run : SolveRun
    denoiser : Denoiser
        Denoiser on ``run.path``, see ``resolve_denoiser``.
    x : numpy array
        State(s) at time ``t``.
    t : float
    on_rank_deficiency : function, optional
        Forwarded to ``LinearOperator.solve_gram``.

    Returns
    -------
    GuidedField
    """
    op, path, cfg = run.operator, run.path, run.guidance
    x1_hat = denoiser(x, t)
    if cfg.null_range:
        x1_hat = pigdm.null_range_combine(op, run.y, x1_hat)

    def vjp(cotangent):
        if cfg.null_range:
            cotangent = pigdm.null_space_cotangent(op, cotangent)
        return denoiser.vjp(x, t, cotangent)

    r2 = pigdm.rt2(cfg.rt2_rule, path, t)
    weight = pigdm.gamma(cfg.gamma_rule, path, t)
    coeff = pigdm.correction_coefficient(path, t)
    if weight == 0.0:
        g = np.zeros_like(x1_hat)
    else:
        g = pigdm.pigdm_g(op, run.y, x1_hat, vjp, r2, cfg.sigma_y, on_rank_deficiency=on_rank_deficiency)
    v = pigdm.correct_vf(vf_from_x1_hat(path, t, x, x1_hat), g, path, t, cfg.gamma_rule)
    return GuidedField(x1_hat, g, v, r2, weight, coeff)


def integrate(run, x_t0, callback=None, denoiser=None):
    """Euler integration of the corrected vector field from ``x_t0``.

    Parameters
    ----------
    run : SolveRun
    x_t0 : numpy array
        State(s) at ``run.t0``.
    callback : function, optional
        ``callback(step, t, x_t, x1_hat, v_corrected)`` called before every
        Euler update.
    denoiser : Denoiser, optional
        Pre-resolved denoiser on ``run.path``.

    Returns
    -------
    SolveResult

    Raises
    ------
    DivergenceError
        If the state becomes non-finite.
    """
    if denoiser is None:
        denoiser = resolve_denoiser(run)
    op = run.operator
    grid = time_grid(run)
    x = np.array(x_t0, dtype=float)
    if x.shape[-1] != op.n_in:
        raise ShapeMismatchError((op.n_in,), x.shape, what="initial state")

    warnings_seen = []

    def on_rank_deficiency(message):
        if message not in warnings_seen:
            warnings_seen.append(message)
            logger.warning(message)

    states = [x.copy()] if run.record_trajectory else None
    diagnostics = []
    nfe = vjp_count = 0
    for step in range(run.n_steps):
        t = float(grid[step])
        dt = float(grid[step + 1] - grid[step])
        guided = guided_field(run, denoiser, x, t, on_rank_deficiency=on_rank_deficiency)
        nfe += 1
        if guided.gamma != 0.0:
            vjp_count += 1
        if callback is not None:
            callback(step, t, x, guided.x1_hat, guided.v)

        x = x + dt * guided.v
        diagnostics.append(
            {
                "step": step,
                "t": t,
                "residual_norm": _norm(run.y - op.apply(guided.x1_hat)),
                "g_norm": _norm(guided.g),
                "coeff": guided.coeff,
                "r2": guided.r2,
                "gamma": guided.gamma,
            }
        )
        logger.debug(f"step {step} t={t:.4f} |g|={np.max(diagnostics[-1]['g_norm']):.3e}")
        if not np.all(np.isfinite(x)):
            raise DivergenceError(step, diagnostics)
        if states is not None:
            states.append(x.copy())

    x1 = denoiser(x, run.t_end)
    if run.guidance.null_range:
        x1 = pigdm.null_range_combine(op, run.y, x1)
    if not np.all(np.isfinite(x1)):
        raise DivergenceError(run.n_steps, diagnostics)

    trajectory = (grid.copy(), np.stack(states)) if states is not None else None
    return SolveResult(
        x1=x1,
        diagnostics=diagnostics,
        trajectory=trajectory,
        warnings=warnings_seen,
        nfe=nfe,
        vjp_evaluations=vjp_count,
        readout_evaluations=1,
    )


def solve(run, n_runs=None, callback=None):
    """Solve the inverse problem for one run or a vectorized batch of runs.

    Parameters
    ----------
    run : SolveRun
    n_runs : int, optional
        Number of independent runs; run i draws its noise from
        ``SeedSequence([run.seed, i])``.
    callback : function, optional
        Forwarded to ``integrate``.

    Returns
    -------
    SolveResult
    """
    start = time.perf_counter()
    validate_grid(run)
    denoiser = resolve_denoiser(run)
    x_t0 = initialize(run, n_runs=n_runs)
    logger.info(
        f"Solving on the {run.path.kind} path: t0={run.t0}, {run.n_steps} steps, "
        f"{1 if n_runs is None else n_runs} run(s)"
    )
    result = integrate(run, x_t0, callback=callback, denoiser=denoiser)
    result.wall_time = time.perf_counter() - start
    logger.info(f"Solve finished in {result.wall_time:.2f}s with {result.nfe} model evaluations")
    return result
