"""Linear measurement operators y = A x.

Every operator maps flat state vectors (last axis, any leading batch axes)
and carries a thin SVD computed eagerly at construction. The SVD backs the
pseudo-inverse, the row-space projector and the Gram solve
(r^2 A A^T + sigma_y^2 I)^{-1} used by the guidance term.
"""

import abc
import logging
import os
import warnings

import numpy as np
from scipy import linalg, ndimage

from flowsolve.data_format.file_io import read_array
from flowsolve.operators import masks
from flowsolve.utils.exceptions import (
    ConfigurationError,
    RankDeficiencyWarning,
    ShapeMismatchError,
    SingularSystemError,
)

logger = logging.getLogger(__name__)

MAX_INPUT_DIM = 16384
PINV_RTOL = 1e-10
# residual mass outside the range of A below this (relative to 1 + |residual|) is round-off
RANGE_RTOL = 1e-10


class LinearOperator(abc.ABC):
    """Base class of the measurement operators.

    A derived class sets ``n_in`` and ``n_out`` before calling
    ``super().__init__()`` and implements ``_apply`` and ``_apply_transpose``
    on (batch, n) arrays. It may override ``_closed_form_svd`` when the
    factorization is known analytically.
    """

    kind = None

    def __init__(self):
        if self.n_in > MAX_INPUT_DIM:
            raise ConfigurationError(
                f"operator input dimension {self.n_in} exceeds the limit of {MAX_INPUT_DIM}"
            )
        factors = self._closed_form_svd()
        if factors is None:
            factors = self._dense_svd()
        self._svd = tuple(np.asarray(f, dtype=float) for f in factors)
        for f in self._svd:
            f.setflags(write=False)
        s = self._svd[1]
        self.pinv_cutoff = PINV_RTOL * (s[0] if s.size else 0.0)
        self.rank = int(np.count_nonzero(s > self.pinv_cutoff))

    @property
    def shape(self):
        return (self.n_out, self.n_in)

    @abc.abstractmethod
    def _apply(self, x):
        pass

    @abc.abstractmethod
    def _apply_transpose(self, u):
        pass

    def _closed_form_svd(self):
        return None

    def _dense_svd(self):
        try:
            u, s, vt = linalg.svd(self.to_dense(), full_matrices=False)
        except linalg.LinAlgError as err:
            raise SingularSystemError(f"SVD of the {self.kind} operator did not converge") from err
        return u, s, vt

    @staticmethod
    def _batched(fn, x, size, what):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != size:
            raise ShapeMismatchError((size,), x.shape, what=what)
        flat = x.reshape(-1, size)
        out = fn(flat)
        return out.reshape(x.shape[:-1] + (out.shape[-1],))

    def apply(self, x):
        """A x, batched over leading axes."""
        return self._batched(self._apply, x, self.n_in, f"{self.kind} operator input")

    def apply_transpose(self, u):
        """A^T u, batched over leading axes."""
        return self._batched(self._apply_transpose, u, self.n_out, f"{self.kind} operator adjoint input")

    def to_dense(self):
        """The (n_out, n_in) matrix of the operator."""
        return self._apply(np.eye(self.n_in)).T

    def svd(self):
        """Thin SVD ``(U, s, Vt)`` with s non-increasing."""
        return self._svd

    def pinv_apply(self, y):
        """A^+ y with singular values below ``1e-10 * s_max`` treated as zero."""
        u, s, vt = self._svd
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n_out:
            raise ShapeMismatchError((self.n_out,), y.shape, what="observation")
        inv = np.zeros_like(s)
        keep = s > self.pinv_cutoff
        inv[keep] = 1.0 / s[keep]
        return ((y @ u) * inv) @ vt

    def row_space_projection(self, x):
        """A^+ A x, the orthogonal projection onto the row space of A."""
        _, s, vt = self._svd
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatchError((self.n_in,), x.shape, what="state")
        basis = vt[s > self.pinv_cutoff]
        return (x @ basis.T) @ basis

    def solve_gram(self, r2, sigma_y2, residual, on_rank_deficiency=None):
        """Solve (r2 A A^T + sigma_y2 I) z = residual through the SVD.

        Parameters
        ----------
        r2 : float
            Non-negative variance of the Gaussian approximation to q(x_1 | x_t).
        sigma_y2 : float
            Non-negative observation noise variance.
        residual : numpy array
            Right-hand side(s), observation space on the last axis.
        on_rank_deficiency : function, optional
            Called with a message when sigma_y2 = 0 and a non-negligible part
            of the residual lies outside the range of A and is dropped. Defaults to
            ``warnings.warn(..., RankDeficiencyWarning)``.

        Returns
        -------
        numpy array

        Raises
        ------
        SingularSystemError
            If r2 = sigma_y2 = 0.
        """
        if r2 < 0 or sigma_y2 < 0:
            raise ValueError(f"Gram system needs r2 >= 0 and sigma_y2 >= 0, got {r2} and {sigma_y2}")
        if r2 == 0 and sigma_y2 == 0:
            raise SingularSystemError("Gram system with r2 = sigma_y2 = 0 is singular")
        u, s, _ = self._svd
        residual = np.asarray(residual, dtype=float)
        if residual.shape[-1] != self.n_out:
            raise ShapeMismatchError((self.n_out,), residual.shape, what="residual")
        coeffs = residual @ u
        denom = r2 * s**2 + sigma_y2
        if sigma_y2 > 0:
            return (coeffs / denom) @ u.T + (residual - coeffs @ u.T) / sigma_y2

        keep = (s > self.pinv_cutoff) & (denom > 0)
        kept = coeffs[..., keep]
        dropped = np.linalg.norm(residual - kept @ u[:, keep].T, axis=-1)
        scale = 1.0 + np.linalg.norm(residual, axis=-1)
        if self.rank < self.n_out and np.any(dropped > RANGE_RTOL * scale):
            message = (
                f"{self.kind} operator has rank {self.rank} < {self.n_out}; "
                "residual components outside its range are dropped"
            )
            if on_rank_deficiency is None:
                warnings.warn(message, RankDeficiencyWarning, stacklevel=2)
            else:
                on_rank_deficiency(message)
        return (kept / denom[keep]) @ u[:, keep].T

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class DenseOperator(LinearOperator):
    """An explicit matrix. The identity and zero operators are dense."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or 0 in matrix.shape:
            raise ConfigurationError(f"dense operator needs a non-empty 2-D matrix, got shape {matrix.shape}")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.n_out, self.n_in = matrix.shape
        super().__init__()

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    def _apply(self, x):
        return x @ self.matrix.T

    def _apply_transpose(self, u):
        return u @ self.matrix

    def to_dense(self):
        return self.matrix.copy()


class InpaintMask(LinearOperator):
    """Selection of the observed coordinates ``keep`` out of ``n_in``."""

    kind = "mask"

    def __init__(self, keep, n_in):
        keep = np.unique(np.asarray(keep, dtype=np.int64))
        if keep.size == 0:
            raise ConfigurationError("mask keeps no coordinates")
        if keep[0] < 0 or keep[-1] >= n_in:
            raise ConfigurationError(f"mask indices must lie in [0, {n_in}), got [{keep[0]}, {keep[-1]}]")
        keep.setflags(write=False)
        self.keep = keep
        self.n_in = int(n_in)
        self.n_out = keep.size
        super().__init__()

    def _apply(self, x):
        return x[:, self.keep]

    def _apply_transpose(self, u):
        out = np.zeros((u.shape[0], self.n_in))
        out[:, self.keep] = u
        return out

    def _closed_form_svd(self):
        vt = np.zeros((self.n_out, self.n_in))
        vt[np.arange(self.n_out), self.keep] = 1.0
        return np.eye(self.n_out), np.ones(self.n_out), vt

    @property
    def observed(self):
        """Boolean indicator of the kept coordinates."""
        out = np.zeros(self.n_in, dtype=bool)
        out[self.keep] = True
        return out


class Downsample(LinearOperator):
    """Non-overlapping block averaging by ``factor`` along every spatial axis.

    Parameters
    ----------
    factor : int
    signal_shape : tuple of int
        Spatial shape, (n,) or (H, W); each side divisible by ``factor``.
    channels : int
        Channels are stacked first and averaged independently.
    """

    kind = "downsample"

    def __init__(self, factor, signal_shape, channels=1):
        factor = int(factor)
        signal_shape = tuple(int(n) for n in signal_shape)
        if factor < 1:
            raise ConfigurationError(f"downsample factor must be >= 1, got {factor}")
        if len(signal_shape) not in (1, 2) or any(n % factor for n in signal_shape):
            raise ConfigurationError(
                f"signal shape {signal_shape} is not a 1-D/2-D shape divisible by {factor}"
            )
        self.factor = factor
        self.signal_shape = signal_shape
        self.channels = int(channels)
        self.out_shape = tuple(n // factor for n in signal_shape)
        self.block_size = factor ** len(signal_shape)
        self.n_in = self.channels * int(np.prod(signal_shape))
        self.n_out = self.channels * int(np.prod(self.out_shape))
        super().__init__()

    def _blocked_shape(self, batch):
        shape = [batch, self.channels]
        for n in self.out_shape:
            shape += [n, self.factor]
        return shape

    def _apply(self, x):
        blocks = x.reshape(self._blocked_shape(x.shape[0]))
        axes = tuple(range(3, blocks.ndim, 2))
        return blocks.mean(axis=axes).reshape(x.shape[0], self.n_out)

    def _repeat(self, u):
        grid = u.reshape((u.shape[0], self.channels) + self.out_shape)
        for axis in range(2, grid.ndim):
            grid = np.repeat(grid, self.factor, axis=axis)
        return grid.reshape(u.shape[0], self.n_in)

    def _apply_transpose(self, u):
        return self._repeat(u) / self.block_size

    def upsample_nearest(self, y):
        """Nearest-neighbour lift of low-resolution data into the state space."""
        return self._batched(self._repeat, y, self.n_out, "low-resolution observation")

    def _closed_form_svd(self):
        # Rows of A are disjoint blocks of 1/B, each with norm 1/sqrt(B).
        vt = self._apply_transpose(np.eye(self.n_out)) * np.sqrt(self.block_size)
        s = np.full(self.n_out, 1.0 / np.sqrt(self.block_size))
        return np.eye(self.n_out), s, vt


def gaussian_kernel_1d(size, std):
    """Normalized 1-D Gaussian kernel of odd length ``size``."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"blur kernel size must be a positive odd integer, got {size}")
    if size == 1:
        return np.ones(1)
    if std <= 0:
        raise ConfigurationError(f"blur std must be positive, got {std}")
    ax = np.arange(size) - size // 2
    kernel = np.exp(-0.5 * ax**2 / std**2)
    return kernel / kernel.sum()


def gaussian_kernel(size, std):
    """Normalized (size, size) Gaussian kernel; size 1 is the delta kernel."""
    k = gaussian_kernel_1d(size, std)
    return np.outer(k, k)


class GaussianBlur(LinearOperator):
    """2-D convolution with a normalized Gaussian kernel and circular boundary."""

    kind = "blur"

    def __init__(self, size, std, image_shape, channels=1):
        image_shape = tuple(int(n) for n in image_shape)
        if len(image_shape) != 2:
            raise ConfigurationError(f"blur needs a 2-D image shape, got {image_shape}")
        if size > min(image_shape):
            raise ConfigurationError(f"blur kernel size {size} exceeds image shape {image_shape}")
        self.size = int(size)
        self.std = float(std)
        self.kernel_1d = gaussian_kernel_1d(self.size, self.std)
        self.kernel = np.outer(self.kernel_1d, self.kernel_1d)
        self.image_shape = image_shape
        self.channels = int(channels)
        self.n_in = self.n_out = self.channels * image_shape[0] * image_shape[1]
        super().__init__()

    def _filter(self, fn, x):
        images = x.reshape((x.shape[0], self.channels) + self.image_shape)
        out = fn(images, self.kernel[None, None], mode="wrap")
        return out.reshape(x.shape[0], self.n_in)

    def _apply(self, x):
        return self._filter(ndimage.convolve, x)

    def _apply_transpose(self, u):
        return self._filter(ndimage.correlate, u)

    def circulant_factor(self, axis):
        """(n, n) circular convolution matrix of the 1-D kernel along image ``axis``."""
        n = self.image_shape[axis]
        return ndimage.convolve1d(np.eye(n), self.kernel_1d, axis=0, mode="wrap")

    def _closed_form_svd(self):
        # The kernel is separable, so A = I_channels (x) B_rows (x) B_cols.
        u_h, s_h, vt_h = linalg.svd(self.circulant_factor(0))
        u_w, s_w, vt_w = linalg.svd(self.circulant_factor(1))
        eye = np.eye(self.channels)
        s = np.kron(np.ones(self.channels), np.kron(s_h, s_w))
        order = np.argsort(-s, kind="stable")
        u = np.kron(eye, np.kron(u_h, u_w))[:, order]
        vt = np.kron(eye, np.kron(vt_h, vt_w))[order]
        return u, s[order], vt


def upsample_nearest(op, y):
    """Nearest-neighbour lift of y; defined for downsampling operators only."""
    if not isinstance(op, Downsample):
        raise ConfigurationError(f"nearest-neighbour lift is defined for downsample operators, not {op.kind}")
    return op.upsample_nearest(y)


OPERATOR_KEYS = {
    "identity": set(),
    "dense": {"path", "matrix"},
    "mask": {"keep", "generator", "box_fraction", "n_boxes", "max_box_fraction", "seed"},
    "downsample": {"factor"},
    "blur": {"size", "std"},
}


def operator_from_dict(spec, n_in, image_shape=None, channels=1, base_dir=None):
    """Build an operator from its run-config block.

    Parameters
    ----------
    spec : dict
        ``{"kind": "mask", "keep": [...]}``, ``{"kind": "mask", "generator": "center" | "boxes", ...}``,
        ``{"kind": "downsample", "factor": f}``, ``{"kind": "blur", "size": k, "std": s}``,
        ``{"kind": "dense", "path": file}`` or ``{"kind": "identity"}``.
    n_in : int
        State dimension.
    image_shape : tuple of int, optional
        Spatial shape of image-valued states; required by blur and mask generators.
    channels : int
    base_dir : str, optional
        Directory that a relative matrix path is resolved against.

    Returns
    -------
    LinearOperator
    """
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in OPERATOR_KEYS:
        raise ConfigurationError(f"unknown operator kind {kind!r}, expected one of {sorted(OPERATOR_KEYS)}")
    unknown = set(spec) - OPERATOR_KEYS[kind]
    if unknown:
        raise ConfigurationError(f"unknown keys in {kind} operator block: {sorted(unknown)}")
    spatial = tuple(image_shape) if image_shape is not None else (n_in // channels,)
    if channels * int(np.prod(spatial)) != n_in:
        raise ConfigurationError(
            f"image shape {spatial} x {channels} channels does not match dimension {n_in}"
        )

    if kind == "identity":
        return DenseOperator.identity(n_in)
    if kind == "dense":
        if ("path" in spec) == ("matrix" in spec):
            raise ConfigurationError("dense operator needs exactly one of 'path' or 'matrix'")
        if "path" in spec:
            matrix = read_array(spec["path"], base_dir=base_dir)
            logger.info(f"Loaded {matrix.shape[0]}x{matrix.shape[1]} operator from {os.fspath(spec['path'])}")
        else:
            matrix = np.asarray(spec["matrix"], dtype=float)
        op = DenseOperator(matrix)
        if op.n_in != n_in:
            raise ShapeMismatchError((op.n_out, n_in), op.shape, what="dense operator")
        return op
    if kind == "mask":
        if "keep" in spec:
            if "generator" in spec:
                raise ConfigurationError("mask block takes either 'keep' or 'generator', not both")
            return InpaintMask(spec["keep"], n_in)
        if image_shape is None:
            raise ConfigurationError("generated masks need an image_shape")
        observed = masks.mask_from_dict(spec, image_shape)
        return InpaintMask(masks.keep_indices(observed, channels), n_in)
    if kind == "downsample":
        return Downsample(spec.get("factor", 2), spatial, channels=channels)
    if image_shape is None:
        raise ConfigurationError("blur operator needs an image_shape")
    return GaussianBlur(spec.get("size", 5), spec.get("std", 1.0), image_shape, channels=channels)
