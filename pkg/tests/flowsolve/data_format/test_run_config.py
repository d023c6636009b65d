import os

import pytest
from numpy.testing import assert_allclose

from flowsolve.data_format.run_config import ORACLE_DEFAULTS, SOLVER_DEFAULTS, RunConfig
from flowsolve.model.denoisers import Denoiser, VectorFieldModel
from flowsolve.operators.linear_operators import InpaintMask
from flowsolve.utils.exceptions import ConfigurationError, ShapeMismatchError


def _minimal(**extra):
    data = {
        "name": "minimal",
        "model": {"prior": {"standard_normal": 4}},
        "operator": {"kind": "mask", "keep": [0, 2]},
        "observation": {"values": [0.5, -0.5]},
    }
    data.update(extra)
    return data


def test_defaults_are_filled_in():
    cfg = RunConfig.from_dict(_minimal())
    data = cfg.to_dict()
    assert data["solver"] == SOLVER_DEFAULTS
    assert data["oracle"] == ORACLE_DEFAULTS
    assert data["path"] == {"kind": "cond_ot", "params": {}}
    assert data["model"]["native_path"] == data["path"]
    assert data["guidance"] == {"rt2": "flow", "gamma": "unadaptive", "sigma_y": 0.0, "null_range": False}
    assert cfg.seed == 0 and cfg.image_shape is None


def test_round_trip(tmp_path):
    cfg = RunConfig.from_dict(_minimal(solver={"t0": 0.4, "seed": 12}, guidance={"sigma_y": 0.1}))
    filename = os.path.join(tmp_path, "cfg.json")
    cfg.save(filename)
    again = RunConfig.from_file(filename)
    assert again.to_dict() == cfg.to_dict()
    assert again.base_dir == str(tmp_path)


@pytest.mark.parametrize(
    "extra",
    [
        {"color": "red"},
        {"solver": {"steps": 10}},
        {"guidance": {"gamma": "sometimes"}},
        {"solver": {"init_mode": "zeros"}},
        {"solver": {"lift": "cubic"}},
        {"oracle": {"probes": 3}},
        {"repeat": 0},
        {"observation": {"values": [0.0, 0.0], "path": "y.fsmx"}},
        {"observation": {"seed": 3}},
        {"model": {"prior": {"standard_normal": 4}, "parameterization": "score"}},
        {"model": {"native_path": {"kind": "vp"}}},
        {"path": {"kind": "edm"}},
    ],
)
def test_invalid_configs(extra):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(_minimal(**extra))


def test_missing_required_block():
    data = _minimal()
    del data["operator"]
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(data)


def test_overrides():
    cfg = RunConfig.from_dict(_minimal())
    changed = cfg.with_overrides(
        seed=9, output_dir="/tmp/out", solver={"n_steps": 7}, guidance={"gamma": "disabled"}
    )
    assert changed.seed == 9
    assert changed.output_dir == "/tmp/out"
    assert changed.data["solver"]["n_steps"] == 7
    assert changed.build_guidance().gamma_rule.value == "disabled"
    assert cfg.seed == 0
    with pytest.raises(ConfigurationError):
        cfg.with_overrides(solver={"t_start": 0.1})


def test_relative_paths_resolve_against_the_config(tmp_path):
    cfg = RunConfig.from_dict(_minimal(output_dir="out"), base_dir=tmp_path)
    assert cfg.output_dir == os.path.join(tmp_path, "out")
    assert cfg.resolve("prior.json") == os.path.join(tmp_path, "prior.json")


def test_builders(rng):
    cfg = RunConfig.from_dict(_minimal(guidance={"sigma_y": 0.05}, solver={"t0": 0.3, "n_steps": 12}))
    prior = cfg.build_prior()
    model = cfg.build_model(prior)
    assert isinstance(model, Denoiser)
    op = cfg.build_operator(prior.dim)
    assert isinstance(op, InpaintMask)
    y, truth = cfg.observation(prior, op, rng)
    assert_allclose(y, [0.5, -0.5])
    assert truth is None

    run = cfg.solve_run(model, op, y, seed=44)
    assert (run.t0, run.n_steps, run.seed) == (0.3, 12, 44)
    assert run.guidance.sigma_y == 0.05

    model = {"prior": {"standard_normal": 4}, "parameterization": "vector_field"}
    vf = RunConfig.from_dict(_minimal(model=model))
    assert isinstance(vf.build_model(), VectorFieldModel)


def test_simulated_observation(rng):
    cfg = RunConfig.from_dict(_minimal(observation={"ground_truth": "prior"}, guidance={"sigma_y": 0.0}))
    prior = cfg.build_prior()
    op = cfg.build_operator(prior.dim)
    y, truth = cfg.observation(prior, op, rng)
    assert truth.shape == (4,)
    assert_allclose(y, truth[[0, 2]])


def test_image_shape_must_match_the_prior():
    cfg = RunConfig.from_dict(_minimal(image_shape=[3, 3]))
    with pytest.raises(ShapeMismatchError):
        cfg.build_prior()
    sized = RunConfig.from_dict(_minimal(image_shape=[2, 2]))
    assert sized.build_prior().dim == 4
    assert sized.image_shape == (2, 2)
