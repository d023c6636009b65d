import numpy as np
import pytest

from flowsolve.operators.masks import center_mask, keep_indices, mask_from_dict, random_boxes_mask
from flowsolve.utils.exceptions import ConfigurationError


def test_center_mask():
    observed = center_mask((8, 8), 0.5)
    assert observed.sum() == 64 - 16
    assert not observed[2:6, 2:6].any()
    with pytest.raises(ConfigurationError):
        center_mask((8, 8), 1.0)


def test_random_boxes_are_seeded():
    boxes = random_boxes_mask((8, 8), n_boxes=3, seed=11)
    assert np.array_equal(boxes, random_boxes_mask((8, 8), n_boxes=3, seed=11))
    assert boxes.any() and not boxes.all()
    # boxes covering the whole image still leave one pixel observed
    full = random_boxes_mask((2, 2), n_boxes=50, max_box_fraction=1.0, seed=0)
    assert full.any()
    with pytest.raises(ConfigurationError):
        random_boxes_mask((8, 8), n_boxes=0)


def test_keep_indices_stack_channels():
    assert keep_indices([[True, False], [False, True]]).tolist() == [0, 3]
    assert keep_indices([[True, False], [False, True]], channels=2).tolist() == [0, 3, 4, 7]


def test_mask_from_dict():
    center = mask_from_dict({"generator": "center", "box_fraction": 0.25}, (8, 8))
    assert np.array_equal(center, center_mask((8, 8), 0.25))
    assert np.array_equal(
        mask_from_dict({"generator": "boxes", "n_boxes": 2, "seed": 5}, (8, 8)),
        random_boxes_mask((8, 8), n_boxes=2, seed=5),
    )
    with pytest.raises(ConfigurationError):
        mask_from_dict({"generator": "stripes"}, (8, 8))
