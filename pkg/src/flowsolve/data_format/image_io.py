"""Image readers and writers for [-1, 1]-normalized grayscale images.

PGM is the visualization format (P2 plain and P5 raw, up to 16 bit); FITS is
accepted for ground truths and written for outputs that downstream astronomy
tools should open. Images are mapped linearly [-1, 1] -> [0, maxval].
"""

import abc
import os

import numpy as np
from astropy.io import fits

from flowsolve.data_format.file_io import read_tensor
from flowsolve.utils.exceptions import FormatError

PGM_MAXVAL = 65535
_WHITESPACE = b" \t\n\r\v\f"


def to_levels(image, maxval=PGM_MAXVAL):
    """Quantize [-1, 1] values to integer gray levels, clipping out-of-range pixels."""
    scaled = (np.clip(np.asarray(image, dtype=float), -1.0, 1.0) + 1.0) * 0.5 * maxval
    return np.rint(scaled).astype(np.int64)


def from_levels(levels, maxval):
    return np.asarray(levels, dtype=float) / maxval * 2.0 - 1.0


def write_pgm(path, image, binary=True, maxval=PGM_MAXVAL):
    """Write a 2-D image in [-1, 1] as PGM.

    Parameters
    ----------
    path : str
    image : numpy array (H, W)
    binary : bool
        P5 raw raster if True, P2 plain text otherwise.
    maxval : int
        Largest gray level, at most 65535.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"PGM images must be 2-D, got shape {image.shape}")
    if not 0 < maxval <= PGM_MAXVAL:
        raise ValueError(f"PGM maxval must lie in [1, {PGM_MAXVAL}], got {maxval}")
    levels = to_levels(image, maxval)
    height, width = image.shape
    header = f"{'P5' if binary else 'P2'}\n{width} {height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            dtype = ">u2" if maxval > 255 else "u1"
            f.write(levels.astype(dtype).tobytes())
        else:
            for row in levels:
                f.write((" ".join(str(v) for v in row) + "\n").encode("ascii"))


def _next_token(data, pos):
    """Next header token and the position right after it, skipping comments."""
    while pos < len(data):
        char = data[pos : pos + 1]
        if char == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif char in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", start)
    return data[start:pos], start, pos


def _header_int(data, pos, what):
    token, start, pos = _next_token(data, pos)
    if not token.isdigit():
        raise FormatError(f"PGM {what} is not a positive integer: {token!r}", start)
    value = int(token)
    if value <= 0:
        raise FormatError(f"PGM {what} must be positive, got {value}", start)
    return value, start, pos


def decode_pgm(data):
    """Parse PGM bytes into a float image in [-1, 1]."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"not a PGM file (magic {magic!r})", 0)
    width, _, pos = _header_int(data, 2, "width")
    height, _, pos = _header_int(data, pos, "height")
    maxval, start, pos = _header_int(data, pos, "maxval")
    if maxval > PGM_MAXVAL:
        raise FormatError(f"PGM maxval {maxval} exceeds {PGM_MAXVAL}", start)

    if magic == b"P5":
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise FormatError("missing whitespace after PGM header", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        expected = width * height * dtype.itemsize
        if len(data) - pos < expected:
            raise FormatError(f"PGM raster holds {len(data) - pos} bytes, expected {expected}", pos)
        levels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    else:
        body = data[pos:].split()
        if len(body) < width * height:
            raise FormatError(f"PGM raster holds {len(body)} values, expected {width * height}", pos)
        try:
            levels = np.array([int(v) for v in body[: width * height]], dtype=np.int64)
        except ValueError as err:
            raise FormatError(f"non-integer value in PGM raster: {err}", pos) from err
    if np.any(levels > maxval):
        raise FormatError(f"PGM raster has values above maxval {maxval}", pos)
    return from_levels(levels, maxval).reshape(height, width)


def read_pgm(path):
    with open(path, "rb") as f:
        return decode_pgm(f.read())


def read_fits(path, hdu=0):
    """Read the data of one HDU as float64."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Unable to load file {path}")
    with fits.open(path, memmap=False, lazy_load_hdus=False) as hdul:
        data = hdul[hdu].data
    if data is None:
        raise FormatError(f"FITS HDU {hdu} of {path} holds no data", 0)
    return np.asarray(data, dtype=np.float64)


def write_fits(path, image, header=None, overwrite=True):
    hdu = fits.PrimaryHDU(data=np.asarray(image, dtype=np.float64))
    for key, value in (header or {}).items():
        hdu.header[key] = value
    hdu.writeto(path, overwrite=overwrite)


class ImageReader(abc.ABC):
    """Base class for readers that return a flattened [-1, 1] image.

    A derived class implements ``_read_image(path)`` returning a 2-D (or
    already flat) array; ``__call__`` checks the pixel count against the
    expected shape and flattens, or reshapes to that shape when ``flatten`` is
    False.
    """

    def __init__(self, shape=None):
        self.shape = None if shape is None else tuple(int(s) for s in shape)

    @abc.abstractmethod
    def _read_image(self, path):
        pass

    def __call__(self, path, flatten=True):
        image = np.asarray(self._read_image(path), dtype=float)
        if self.shape is not None and image.size != int(np.prod(self.shape)):
            raise FormatError(f"{path} holds {image.size} values, expected image shape {self.shape}", 0)
        if flatten:
            return image.ravel()
        return image if self.shape is None else image.reshape(self.shape)


class PGMReader(ImageReader):
    def _read_image(self, path):
        return read_pgm(path)


class FITSReader(ImageReader):
    def __init__(self, shape=None, hdu=0):
        super().__init__(shape)
        self.hdu = hdu

    def _read_image(self, path):
        return read_fits(path, self.hdu)


class TensorReader(ImageReader):
    def _read_image(self, path):
        return read_tensor(path)


def reader_for(path, shape=None):
    """Pick the image reader from a file extension."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".pgm":
        return PGMReader(shape)
    if ext in (".fits", ".fit"):
        return FITSReader(shape)
    return TensorReader(shape)
