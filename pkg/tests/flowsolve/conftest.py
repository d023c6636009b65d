import json
from os import path

import numpy as np
import pytest

from flowsolve.model.gmm import GaussianMixture

TEST_DIR = path.dirname(__file__)
REPO_DIR = path.abspath(path.join(TEST_DIR, "..", ".."))


@pytest.fixture
def configs_dir():
    return path.join(REPO_DIR, "configs")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def mixture_2d():
    """Two well separated, correlated components in 2-D."""
    return GaussianMixture(
        weights=[0.4, 0.6],
        means=[[-2.0, -1.0], [1.5, 2.0]],
        covariances=[[[0.5, 0.1], [0.1, 0.3]], [[0.4, -0.05], [-0.05, 0.6]]],
    )


@pytest.fixture
def mixture_3d_isotropic():
    return GaussianMixture(
        weights=[0.3, 0.7],
        means=[[1.0, 0.0, -1.0], [-0.5, 0.5, 0.25]],
        isotropic=[0.4, 1.3],
    )


@pytest.fixture
def write_config(tmp_path):
    """Write a run config dict to ``tmp_path`` and return the file name."""

    def _write(data, name="run.json"):
        filename = path.join(tmp_path, name)
        with open(filename, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return filename

    return _write


@pytest.fixture
def probe_states(rng):
    """States drawn from the marginal q(x_t) at each time, as (t, x_t batch) pairs."""

    def _probes(gmm, path_, times, n_per_time):
        return [(float(t), path_.sample_xt(gmm.sample(n_per_time, rng), float(t), rng)) for t in times]

    return _probes
