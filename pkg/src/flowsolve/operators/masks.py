"""Inpainting mask generators.

Masks are boolean images where True marks an observed pixel.
"""

import numpy as np

from flowsolve.utils.exceptions import ConfigurationError


def center_mask(image_shape, box_fraction=0.5):
    """Hide a centered box covering ``box_fraction`` of each side."""
    height, width = (int(n) for n in image_shape)
    if not 0.0 < box_fraction < 1.0:
        raise ConfigurationError(f"box_fraction must lie in (0, 1), got {box_fraction}")
    box_h = max(1, int(round(height * box_fraction)))
    box_w = max(1, int(round(width * box_fraction)))
    top = (height - box_h) // 2
    left = (width - box_w) // 2
    observed = np.ones((height, width), dtype=bool)
    observed[top : top + box_h, left : left + box_w] = False
    return observed


def random_boxes_mask(image_shape, n_boxes=4, max_box_fraction=0.4, seed=0):
    """Hide a union of seeded random rectangles.

    Parameters
    ----------
    image_shape : tuple of int
        (H, W).
    n_boxes : int
        Number of rectangles.
    max_box_fraction : float
        Largest rectangle side as a fraction of the image side.
    seed : int

    Returns
    -------
    numpy array of bool
        At least one pixel stays observed.
    """
    height, width = (int(n) for n in image_shape)
    if n_boxes < 1 or not 0.0 < max_box_fraction <= 1.0:
        raise ConfigurationError("random box masks need n_boxes >= 1 and max_box_fraction in (0, 1]")
    rng = np.random.default_rng(seed)
    observed = np.ones((height, width), dtype=bool)
    max_h = max(1, int(height * max_box_fraction))
    max_w = max(1, int(width * max_box_fraction))
    for _ in range(n_boxes):
        box_h = rng.integers(1, max_h + 1)
        box_w = rng.integers(1, max_w + 1)
        top = rng.integers(0, height - box_h + 1)
        left = rng.integers(0, width - box_w + 1)
        observed[top : top + box_h, left : left + box_w] = False
    if not observed.any():
        observed[0, 0] = True
    return observed


def keep_indices(observed, channels=1):
    """Flat indices of observed pixels, repeated for channel-first stacking."""
    flat = np.flatnonzero(np.asarray(observed, dtype=bool).ravel())
    size = np.asarray(observed).size
    return np.concatenate([flat + c * size for c in range(channels)])


def mask_from_dict(spec, image_shape):
    generator = spec.get("generator")
    if generator == "center":
        return center_mask(image_shape, spec.get("box_fraction", 0.5))
    if generator == "boxes":
        return random_boxes_mask(
            image_shape,
            n_boxes=spec.get("n_boxes", 4),
            max_box_fraction=spec.get("max_box_fraction", 0.4),
            seed=spec.get("seed", 0),
        )
    raise ConfigurationError(f"unknown mask generator {generator!r}, expected 'center' or 'boxes'")
