import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from flowsolve.data_format.file_io import write_tensor
from flowsolve.data_format.image_io import (
    FITSReader,
    PGMReader,
    TensorReader,
    decode_pgm,
    read_fits,
    read_pgm,
    reader_for,
    to_levels,
    write_fits,
    write_pgm,
)
from flowsolve.utils.exceptions import FormatError


@pytest.mark.parametrize("binary, maxval", [(True, 65535), (True, 255), (False, 65535)])
def test_pgm(tmp_path, rng, binary, maxval):
    image = rng.uniform(-1, 1, size=(5, 7))
    filename = os.path.join(tmp_path, "img.pgm")
    write_pgm(filename, image, binary=binary, maxval=maxval)
    with open(filename, "rb") as f:
        assert f.read(2) == (b"P5" if binary else b"P2")
    assert_allclose(read_pgm(filename), image, atol=1.01 / maxval)


def test_pgm_clips_out_of_range_values():
    assert to_levels([-3.0, 0.0, 3.0], maxval=255).tolist() == [0, 128, 255]


def test_pgm_header_comments():
    image = decode_pgm(b"P2\n# made by hand\n2 1\n# levels\n2\n0 2\n")
    assert_allclose(image, [[-1.0, 1.0]])


def test_malformed_pgm_reports_offsets():
    with pytest.raises(FormatError) as excinfo:
        decode_pgm(b"P6\n1 1\n255\n\x00")
    assert excinfo.value.offset == 0
    with pytest.raises(FormatError) as excinfo:
        decode_pgm(b"P5\n2 x\n255\n\x00\x00")
    assert excinfo.value.offset == 5
    with pytest.raises(FormatError) as excinfo:
        decode_pgm(b"P5\n2 2\n255\n\x00")
    assert excinfo.value.offset == 11
    with pytest.raises(FormatError):
        decode_pgm(b"P2\n2 1\n3\n0 4\n")
    with pytest.raises(FormatError):
        decode_pgm(b"P2\n2 1\n70000\n0 4\n")


def test_fits(tmp_path, rng):
    image = rng.standard_normal((4, 6))
    filename = os.path.join(tmp_path, "img.fits")
    write_fits(filename, image, header={"SEED": 3})
    assert_allclose(read_fits(filename), image)
    with pytest.raises(FileNotFoundError):
        read_fits(os.path.join(tmp_path, "missing.fits"))


def test_readers(tmp_path):
    image = np.linspace(-1, 1, 12).reshape(3, 4)
    write_pgm(os.path.join(tmp_path, "a.pgm"), image)
    write_fits(os.path.join(tmp_path, "a.fits"), image)
    write_tensor(os.path.join(tmp_path, "a.fsmx"), image)

    assert isinstance(reader_for("a.pgm"), PGMReader)
    assert isinstance(reader_for("a.FITS"), FITSReader)
    assert isinstance(reader_for("a.fsmx"), TensorReader)
    for name in ["a.pgm", "a.fits", "a.fsmx"]:
        filename = os.path.join(tmp_path, name)
        assert reader_for(filename)(filename).shape == (12,)
        assert_allclose(reader_for(filename, (3, 4))(filename, flatten=False), image, atol=1e-4)

    with pytest.raises(FormatError):
        TensorReader((5, 5))(os.path.join(tmp_path, "a.fsmx"))
