import numpy as np


def run_rng(seed, run_index=0):
    """Generator owned by one run of a batch.

    The stream is derived from ``SeedSequence([seed, run_index])`` so runs are
    independent of each other and of the order in which they are executed.

    Parameters
    ----------
    seed : int
        The 64-bit seed of the run configuration.
    run_index : int
        Index of the run inside its batch or repeat group.

    Returns
    -------
    numpy.random.Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run_index)]))


def derive_seed(seed, run_index):
    """64-bit seed for run ``run_index`` of a repeat group started from ``seed``."""
    state = np.random.SeedSequence([int(seed), int(run_index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


OBSERVATION_STREAM = 1
PROBE_STREAM = 2


def stream_rng(seed, stream):
    """Generator for a named auxiliary stream (observation noise, oracle probes).

    Auxiliary streams are spawned children of ``seed`` and never coincide with
    the per-run streams of ``run_rng``.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))
