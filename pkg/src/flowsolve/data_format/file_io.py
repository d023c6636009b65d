import json
import logging
import os
import shutil
import struct
from pathlib import Path

import h5py
import numpy as np

from flowsolve.utils.exceptions import FormatError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"FSMX"
TENSOR_HEADER = struct.Struct("<4sHH")
TENSOR_MAX_SIDE = 0xFFFF


def get_data_from_json(filename):
    """Open a JSON text file, and return encoded data as dictionary.

    Parameters
    ----------
    filename : str
        The name of the file to load.

    Returns
    -------
        dictionary of encoded data

    Raises
    ------
    FileNotFoundError if the file cannot be found.
    """
    if not Path(filename).exists():
        raise FileNotFoundError(f"Unable to load file {filename}")

    with open(filename, "r", encoding="utf-8") as f:
        data = json.load(f)
    return data


class NpEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super(NpEncoder, self).default(obj)


def write_json(data, output_file, allow_cached=False):
    """Write a JSON document through a temporary file and an atomic move.

    Parameters
    ----------
    data : dict or list
        Anything ``NpEncoder`` can serialize.
    output_file : str
        Destination path; parent directories are created.
    allow_cached : bool
        If the file already exists, keep it and skip writing.
    """
    parent = os.path.dirname(output_file)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if os.path.exists(output_file) and allow_cached:
        logger.warning(f"Reusing existing file '{output_file}'. Delete it to regenerate.")
        return
    tmp_file = output_file + ".tmp"
    with open(tmp_file, "w", encoding="utf-8") as f:
        json.dump(data, f, cls=NpEncoder, indent=2, sort_keys=True)
        f.write("\n")
    shutil.move(tmp_file, output_file)


def _as_matrix(array):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 0:
        raise ValueError("cannot store a scalar as a tensor; wrap it in a 1-element vector")
    if array.ndim == 1:
        return array[None, :]
    return array.reshape(-1, array.shape[-1])


def encode_tensor(array):
    """Bytes of the ``.fsmx`` encoding of an array.

    The layout is an 8-byte little-endian header (magic ``FSMX``, uint16 rows,
    uint16 cols) followed by the float64 little-endian row-major payload. 1-D
    arrays are one row; higher ranks fold leading axes into rows.
    """
    matrix = _as_matrix(array)
    rows, cols = matrix.shape
    if rows > TENSOR_MAX_SIDE or cols > TENSOR_MAX_SIDE:
        raise ValueError(f"tensor of shape {matrix.shape} exceeds the {TENSOR_MAX_SIDE} limit per side")
    return TENSOR_HEADER.pack(TENSOR_MAGIC, rows, cols) + matrix.astype("<f8").tobytes(order="C")


def decode_tensor(data):
    """Parse ``.fsmx`` bytes into a (rows, cols) float64 array.

    Raises
    ------
    FormatError
        With the byte offset of the first malformed field.
    """
    if len(data) < TENSOR_HEADER.size:
        raise FormatError(f"truncated tensor header ({len(data)} of {TENSOR_HEADER.size} bytes)", len(data))
    magic, rows, cols = TENSOR_HEADER.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}", 0)
    expected = rows * cols * 8
    payload = len(data) - TENSOR_HEADER.size
    if payload != expected:
        raise FormatError(
            f"tensor header declares {rows}x{cols} ({expected} bytes) but {payload} payload bytes follow",
            TENSOR_HEADER.size,
        )
    return np.frombuffer(data, dtype="<f8", offset=TENSOR_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_tensor(path, array):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def read_tensor(path):
    """Read an ``.fsmx`` file as a (rows, cols) array."""
    if not Path(path).exists():
        raise FileNotFoundError(f"Unable to load file {path}")
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def read_array(path, base_dir=None):
    """Read a tensor or FITS file, resolving relative paths against ``base_dir``.

    FITS files (``.fits``, ``.fit``) go through astropy; everything else is
    treated as ``.fsmx``.
    """
    from flowsolve.data_format.image_io import read_fits

    path = os.fspath(path)
    if base_dir is not None and not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    if path.lower().endswith((".fits", ".fit")):
        return read_fits(path)
    return read_tensor(path)


def write_trajectory_h5(outname, times, states, attrs=None):
    """Dump an ODE trajectory to HDF5.

    Parameters
    ----------
    outname : str
        The name of the output file.
    times : array (n_steps + 1,)
    states : array (n_steps + 1, ...)
        The state at every grid time.
    attrs : dict, optional
        Scalar metadata stored as file attributes.
    """
    with h5py.File(outname, "w") as f:
        f.create_dataset("times", data=np.asarray(times, dtype=np.float64))
        f.create_dataset("states", data=np.asarray(states, dtype=np.float64))
        for key, value in (attrs or {}).items():
            f.attrs[key] = value


def read_trajectory_h5(filename):
    """Return ``(times, states, attrs)`` from a trajectory dump."""
    if not Path(filename).exists():
        raise FileNotFoundError(f"Unable to load file {filename}")
    with h5py.File(filename, "r") as f:
        return f["times"][()], f["states"][()], dict(f.attrs)
