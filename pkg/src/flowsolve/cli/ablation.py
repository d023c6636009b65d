"""Cartesian-product ablation sweeps over solver and guidance settings.

A sweep spec is a JSON object::

    {"axes": {"t0": [0.1, 0.2], "n_steps": [20, 50]}, "repeat": 1, "oracle_gap": true}

Cells run on a thread pool; rows reach ``<name>_sweep.csv`` through a single
writer in cell order, so the file does not depend on scheduling. Every column
except ``wall_time`` is reproducible under the seed.
"""

import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

from flowsolve.cli.commands import (
    EXIT_OK,
    build_components,
    build_problem,
    image_view_shape,
    load_config,
    posterior_mean,
)
from flowsolve.data_format.file_io import NpEncoder, get_data_from_json
from flowsolve.evaluation.metrics import metrics_row
from flowsolve.model.denoisers import denoiser_to_vf
from flowsolve.oracle.posterior import exact_conditional_denoiser
from flowsolve.solver.sampler import solve
from flowsolve.utils.exceptions import ConfigurationError, DivergenceError, RangeUnattainableError
from flowsolve.utils.rng import derive_seed

logger = logging.getLogger(__name__)

SWEEP_SCHEMA_VERSION = 1
# axis name -> (config block, key in that block)
SWEEP_AXES = {
    "t0": ("solver", "t0"),
    "n_steps": ("solver", "n_steps"),
    "init_mode": ("solver", "init_mode"),
    "lift": ("solver", "lift"),
    "end_epsilon": ("solver", "end_epsilon"),
    "gamma_rule": ("guidance", "gamma"),
    "rt2_rule": ("guidance", "rt2"),
    "sigma_y": ("guidance", "sigma_y"),
    "null_range": ("guidance", "null_range"),
}
SWEEP_SPEC_KEYS = {"axes", "repeat", "oracle_gap"}
SWEEP_COLUMNS = (
    ["schema_version", "cell", "repeat", "seed"]
    + list(SWEEP_AXES)
    + ["status", "psnr", "ssim", "mse", "posterior_mean_error", "oracle_gap", "nfe", "wall_time", "detail"]
)
METRIC_KEYS = ("psnr", "ssim", "mse", "posterior_mean_error", "nfe", "wall_time")
# run config entries the prior, operator and model are built from
COMPONENT_KEYS = ("model", "operator", "image_shape", "channels")
THREADS_ENV = "FLOWSOLVE_THREADS"


def load_sweep(source):
    """Validate a sweep spec (file name or dict) into ``(axes, repeat, oracle_gap)``."""
    spec = get_data_from_json(source) if isinstance(source, (str, os.PathLike)) else dict(source)
    unknown = set(spec) - SWEEP_SPEC_KEYS
    if unknown:
        raise ConfigurationError(f"unknown keys in sweep spec: {sorted(unknown)}")
    axes = spec.get("axes")
    if not isinstance(axes, dict) or not axes:
        raise ConfigurationError("sweep spec needs a non-empty 'axes' object")
    bad = set(axes) - set(SWEEP_AXES)
    if bad:
        raise ConfigurationError(f"cannot sweep {sorted(bad)}, sweepable axes are {list(SWEEP_AXES)}")
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"sweep axis '{name}' needs a non-empty list of values")
    repeat = spec.get("repeat")
    if repeat is not None and int(repeat) < 1:
        raise ConfigurationError(f"repeat must be >= 1, got {repeat}")
    return axes, None if repeat is None else int(repeat), bool(spec.get("oracle_gap", True))


def sweep_cells(axes):
    """Cartesian product of the axes, in row-major order of the axes as listed."""
    names = list(axes)
    return [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]


def cell_config(cfg, cell):
    """Run config of one sweep cell."""
    solver, guidance = {}, {}
    for name, value in cell.items():
        block, key = SWEEP_AXES[name]
        (solver if block == "solver" else guidance)[key] = value
    return cfg.with_overrides(solver=solver, guidance=guidance)


def component_key(cfg):
    """Hashable key of the run config entries ``build_components`` reads."""
    return json.dumps({key: cfg.data[key] for key in COMPONENT_KEYS}, cls=NpEncoder, sort_keys=True)


def shared_components(cfg, cells):
    """Build the prior, operator and model once per distinct component key of the cells.

    Keys whose build fails are left out; their cells report the error themselves.
    """
    shared, failed = {}, set()
    for cell in cells:
        try:
            cfg_cell = cell_config(cfg, cell)
        except ConfigurationError:
            continue
        key = component_key(cfg_cell)
        if key in shared or key in failed:
            continue
        try:
            shared[key] = build_components(cfg_cell)
        except (ConfigurationError, RangeUnattainableError):
            failed.add(key)
    logger.info(f"Built {len(shared)} shared problem component set(s) for {len(cells)} cell(s)")
    return shared


def worker_count(requested=None):
    """Pool size: ``requested``, else ``FLOWSOLVE_THREADS``, else the core count."""
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                requested = int(env)
            except ValueError as err:
                raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from err
    if requested is None:
        return os.cpu_count() or 1
    if requested < 1:
        raise ConfigurationError(f"worker pool size must be >= 1, got {requested}")
    return requested


def _oracle_gap_callback(problem, path):
    exact = denoiser_to_vf(
        exact_conditional_denoiser(problem.prior, problem.operator, problem.sigma_y, problem.y, path), path
    )
    gap = {"max": 0.0}

    def callback(step, t, x, x1_hat, v_corrected):
        gap["max"] = max(gap["max"], float(np.max(np.abs(v_corrected - exact(x, t)))))

    return callback, gap


def run_cell(cfg, index, cell, repeat, oracle_gap=True, components=None):
    """Solve one cell for every repeat and return its sweep rows.

    Cells whose configuration is infeasible (for instance a start time whose
    SNR the model's native path cannot reach) give ``skipped`` rows, and a
    diverging solve gives a ``diverged`` row; neither aborts the sweep.
    ``components`` maps component keys to prebuilt ``build_components`` sets.
    """
    rows = []
    base = {"schema_version": SWEEP_SCHEMA_VERSION, "cell": index, **{name: None for name in SWEEP_AXES}}
    base.update(cell)
    try:
        cfg_cell = cell_config(cfg, cell)
        shared = None if components is None else components.get(component_key(cfg_cell))
        problem = build_problem(cfg_cell, shared)
    except (ConfigurationError, RangeUnattainableError) as err:
        logger.warning(f"Skipping sweep cell {index} {cell}: {err}")
        return [
            {**base, "repeat": r, "seed": derive_seed(cfg.seed, r), "status": "skipped", "detail": str(err)}
            for r in range(repeat)
        ]
    for name, (block, key) in SWEEP_AXES.items():
        base[name] = cfg_cell.data[block][key]

    reference = posterior_mean(problem)
    for r in range(repeat):
        seed = derive_seed(cfg.seed, r)
        row = {**base, "repeat": r, "seed": seed, "detail": ""}
        try:
            run = cfg_cell.solve_run(problem.model, problem.operator, problem.y, seed=seed)
            callback, gap = _oracle_gap_callback(problem, run.path) if oracle_gap else (None, None)
            result = solve(run, callback=callback)
        except (ConfigurationError, RangeUnattainableError) as err:
            logger.warning(f"Skipping sweep cell {index} {cell}: {err}")
            rows.append({**row, "status": "skipped", "detail": str(err)})
            continue
        except DivergenceError as err:
            logger.warning(f"Sweep cell {index} {cell} diverged: {err}")
            rows.append({**row, "status": "diverged", "detail": str(err)})
            continue
        metrics = metrics_row(
            f"{cfg.name}_cell{index}_run{r}",
            seed,
            result.x1,
            truth=problem.truth,
            image_shape=image_view_shape(cfg_cell),
            posterior_mean=reference,
            nfe=result.nfe,
            wall_time=result.wall_time,
        )
        row.update({key: metrics[key] for key in METRIC_KEYS})
        row["oracle_gap"] = gap["max"] if gap is not None else math.nan
        row["status"] = "ok"
        rows.append(row)
    return rows


def run_sweep(cfg, axes, repeat=None, oracle_gap=True, threads=None, outname=None):
    """Run every cell of a sweep.

    Parameters
    ----------
    cfg : RunConfig
    axes : dict
        Axis name to list of values.
    repeat : int, optional
        Repeats per cell, defaults to the run config's ``repeat``.
    oracle_gap : bool
        Track the max-norm gap between the guided and exact conditional vector
        field along each solve.
    threads : int, optional
        Worker pool size, see ``worker_count``.
    outname : str, optional
        CSV file the rows are written to as cells finish.

    Returns
    -------
    pandas DataFrame
        One row per cell per repeat, columns ``SWEEP_COLUMNS``.
    """
    repeat = cfg.data["repeat"] if repeat is None else repeat
    cells = sweep_cells(axes)
    n_workers = min(worker_count(threads), len(cells))
    logger.info(f"Sweeping {len(cells)} cell(s) x {repeat} repeat(s) on {n_workers} worker(s)")
    components = shared_components(cfg, cells)

    rows = []
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [
            pool.submit(run_cell, cfg, i, cell, repeat, oracle_gap, components)
            for i, cell in enumerate(cells)
        ]
        for i, future in enumerate(futures):
            cell_rows = future.result()
            rows.extend(cell_rows)
            if outname is not None:
                pd.DataFrame(cell_rows, columns=SWEEP_COLUMNS).to_csv(
                    outname, mode="w" if i == 0 else "a", header=i == 0, index=False, float_format="%.17g"
                )
            logger.info(f"Sweep cell {i + 1}/{len(cells)} done")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def cmd_ablate(args):
    """Run the sweep named by ``--sweep`` and write ``<name>_sweep.csv``."""
    cfg = load_config(args)
    axes, repeat, oracle_gap = load_sweep(args.sweep)
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    outname = os.path.join(out_dir, f"{cfg.name}_sweep.csv")
    frame = run_sweep(cfg, axes, repeat=repeat, oracle_gap=oracle_gap, threads=args.threads, outname=outname)
    n_skipped = int((frame["status"] != "ok").sum())
    if n_skipped:
        logger.warning(f"{n_skipped} of {len(frame)} sweep rows were not solved, see the 'detail' column")
    logger.info(f"Wrote {outname}")
    return EXIT_OK
