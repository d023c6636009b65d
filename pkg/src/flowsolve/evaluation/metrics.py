"""Pixel metrics for [-1, 1]-normalized reconstructions.

The data range is R = 2 throughout, so PSNR values here are comparable only
with tools that use the same range.
"""

import math
import os

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from skimage import metrics as skmetrics

from flowsolve.utils.exceptions import ShapeMismatchError

DATA_RANGE = 2.0
PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = [
    "schema_version",
    "run_id",
    "seed",
    "psnr",
    "ssim",
    "mse",
    "posterior_mean_error",
    "nfe",
    "wall_time",
]


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, what="metric operand")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(skmetrics.mean_squared_error(a, b))


def psnr(a, b, data_range=DATA_RANGE):
    """10 log10(R^2 / mse), capped at 100 dB when mse < R^2 1e-10."""
    a, b = _pair(a, b)
    err = skmetrics.mean_squared_error(a, b)
    if err < data_range**2 * 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(skmetrics.peak_signal_noise_ratio(a, b, data_range=data_range)))


def ssim(a, b, data_range=DATA_RANGE, window=SSIM_WINDOW):
    """Mean structural similarity over all fully contained uniform windows.

    The default 8x8 window is even, which skimage's ``structural_similarity``
    does not accept, so the window statistics are computed here with
    population (biased) variances. Images smaller than the window shrink it to
    the image side; 1-D inputs are treated as a single row.

    Parameters
    ----------
    a, b : numpy array
        2-D images (or 1-D signals) of equal shape.
    data_range : float
    window : int
        Side of the square uniform window.

    Returns
    -------
    float
    """
    a, b = _pair(a, b)
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
    if a.ndim != 2:
        raise ValueError(f"ssim needs 2-D images, got shape {a.shape}")
    win = (min(window, a.shape[0]), min(window, a.shape[1]))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    axes = (-2, -1)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    var_a = (wa**2).mean(axis=axes) - mu_a**2
    var_b = (wb**2).mean(axis=axes) - mu_b**2
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def metrics_row(
    run_id, seed, x1, truth=None, image_shape=None, posterior_mean=None, nfe=0, wall_time=math.nan
):
    """One row of the metrics CSV.

    Fidelity columns are NaN when no ground truth is given;
    ``posterior_mean_error`` is the RMS distance to the exact posterior mean.
    """
    row = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "run_id": run_id,
        "seed": seed,
        "psnr": math.nan,
        "ssim": math.nan,
        "mse": math.nan,
        "posterior_mean_error": math.nan,
        "nfe": int(nfe),
        "wall_time": float(wall_time),
    }
    if truth is not None:
        row["mse"] = mse(x1, truth)
        row["psnr"] = psnr(x1, truth)
        shape = tuple(image_shape) if image_shape is not None else np.shape(x1)
        row["ssim"] = ssim(np.reshape(x1, shape), np.reshape(truth, shape))
    if posterior_mean is not None:
        row["posterior_mean_error"] = math.sqrt(mse(x1, posterior_mean))
    return row


def metrics_frame(rows):
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def append_metrics(path, rows):
    """Append rows to a metrics CSV, writing the header only for a new file."""
    frame = metrics_frame(rows)
    exists = os.path.exists(path)
    frame.to_csv(path, mode="a" if exists else "w", header=not exists, index=False, float_format="%.17g")
    return frame
