import json
import logging
import os

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from flowsolve.cli import commands
from flowsolve.cli.main import main
from flowsolve.data_format.file_io import get_data_from_json, read_tensor, read_trajectory_h5, write_tensor
from flowsolve.evaluation.metrics import METRICS_COLUMNS
from flowsolve.utils.exceptions import DivergenceError
from flowsolve.utils.parse_arguments import make_arg_parser
from flowsolve.utils.rng import derive_seed


def _small_problem(**extra):
    data = {
        "name": "small",
        "repeat": 3,
        "model": {"prior": {"standard_normal": 4}},
        "operator": {"kind": "mask", "keep": [0, 2]},
        "guidance": {"sigma_y": 0.05},
        "solver": {"t0": 0.2, "n_steps": 20, "init_mode": "pinv", "seed": 11},
        "observation": {"ground_truth": "prior"},
    }
    data.update(extra)
    return data


def _outputs(directory):
    x1 = [read_tensor(os.path.join(directory, f"small_run{r}_x1.fsmx")) for r in range(3)]
    metrics = pd.read_csv(os.path.join(directory, "small_metrics.csv"))
    return x1, metrics.drop(columns="wall_time")


def test_solve_writes_artifacts(configs_dir, tmp_path):
    config = os.path.join(configs_dir, "solo", "denoise_standard_normal.json")
    assert main(["solve", config, "--output-dir", str(tmp_path), "--seed", "3"]) == 0

    saved = get_data_from_json(os.path.join(tmp_path, "denoise_standard_normal_config.json"))
    assert saved["solver"]["seed"] == 3
    x1 = read_tensor(os.path.join(tmp_path, "denoise_standard_normal_run0_x1.fsmx"))
    assert x1.shape == (1, 16)
    diagnostics = pd.read_csv(os.path.join(tmp_path, "denoise_standard_normal_run0_diagnostics.csv"))
    assert len(diagnostics) == 100
    metrics = pd.read_csv(os.path.join(tmp_path, "denoise_standard_normal_metrics.csv"))
    assert list(metrics.columns) == METRICS_COLUMNS
    assert metrics["seed"].tolist() == [derive_seed(3, 0)]
    assert metrics["nfe"].tolist() == [100]
    # denoising with sigma_y = 0.05 lands close to the truth and to the exact posterior mean
    assert metrics["psnr"].iloc[0] > 20.0
    assert metrics["posterior_mean_error"].iloc[0] < 0.15


def test_repeats_are_distinct_and_reproducible(write_config, tmp_path):
    config = write_config(_small_problem())
    first, second = os.path.join(tmp_path, "first"), os.path.join(tmp_path, "second")
    assert main(["solve", config, "--output-dir", first]) == 0
    assert main(["solve", config, "--output-dir", second]) == 0

    x1, metrics = _outputs(first)
    again, metrics_again = _outputs(second)
    assert not np.allclose(x1[0], x1[1]) and not np.allclose(x1[1], x1[2])
    assert metrics["seed"].tolist() == [derive_seed(11, r) for r in range(3)]
    assert len(set(metrics["seed"])) == 3
    for a, b in zip(x1, again):
        assert np.array_equal(a, b)
    pd.testing.assert_frame_equal(metrics, metrics_again)

    assert main(["solve", config, "--output-dir", first, "--seed", "12"]) == 0
    assert len(pd.read_csv(os.path.join(first, "small_metrics.csv"))) == 6


def test_trajectory_and_preview(write_config, tmp_path):
    config = write_config(
        _small_problem(
            repeat=1,
            image_shape=[4, 4],
            write_pgm=True,
            model={"prior": {"image_prior": {"shape": [4, 4], "n_components": 1}}},
            operator={"kind": "mask", "generator": "center"},
            guidance={"sigma_y": 0.0, "null_range": True},
            solver={"n_steps": 10, "init_mode": "pinv", "seed": 2, "record_trajectory": True},
        )
    )
    assert main(["solve", config, "--output-dir", str(tmp_path)]) == 0
    assert os.path.exists(os.path.join(tmp_path, "small_run0_x1.pgm"))
    times, states, attrs = read_trajectory_h5(os.path.join(tmp_path, "small_run0_trajectory.h5"))
    assert times.shape == (11,) and states.shape == (11, 16)
    assert int(attrs["seed"]) == derive_seed(2, 0)
    assert attrs["n_steps"] == 10 and attrs["path"] == "cond_ot"


def test_missing_prior_file_is_a_configuration_error(write_config, tmp_path, caplog):
    config = write_config(_small_problem(model={"prior": "missing_prior.json"}))
    with caplog.at_level(logging.ERROR):
        assert main(["solve", config, "--output-dir", str(tmp_path)]) == 2
    assert "missing_prior.json" in caplog.text


def test_invalid_config_exit_code(write_config, tmp_path):
    assert main(["solve", write_config(_small_problem(colour="red")), "--output-dir", str(tmp_path)]) == 2
    assert main(["solve", os.path.join(tmp_path, "nope.json")]) == 2


def test_divergence_exit_code(write_config, tmp_path, monkeypatch):
    def diverge(run, n_runs=None, callback=None):
        raise DivergenceError(4, [{"t": 0.5}])

    monkeypatch.setattr(commands, "solve", diverge)
    assert main(["solve", write_config(_small_problem()), "--output-dir", str(tmp_path)]) == 3


def _oracle_config(write_config):
    return write_config(
        _small_problem(
            name="oracle",
            model={"prior": {"standard_normal": 6}},
            operator={"kind": "mask", "keep": [0, 2, 4]},
            solver={"t0": 0.2, "n_steps": 100, "init_mode": "pinv", "seed": 5},
            oracle={"n_probes": 20, "moment_runs": 500, "moment_steps": 1000},
        )
    )


def test_compare_oracle_passes_for_a_standard_normal_prior(write_config, tmp_path):
    assert main(["compare-oracle", _oracle_config(write_config), "--output-dir", str(tmp_path)]) == 0
    report = get_data_from_json(os.path.join(tmp_path, "oracle_oracle_report.json"))
    assert report["status"] == "PASS" and report["mode"] == "pass_fail"
    assert report["max_deviation"] <= 1e-6
    assert report["moment_test"]["passed"]
    probes = pd.read_csv(os.path.join(tmp_path, "oracle_oracle_probes.csv"))
    assert list(probes.columns) == commands.PROBE_COLUMNS
    assert len(probes) == 20
    assert_allclose(probes["t"].iloc[[0, -1]], [0.05, 0.95])


def test_compare_oracle_fails_without_guidance(write_config, tmp_path, caplog):
    config = _oracle_config(write_config)
    with caplog.at_level(logging.ERROR):
        assert main(["compare-oracle", config, "--output-dir", str(tmp_path), "--gamma", "disabled"]) == 1
    report = get_data_from_json(os.path.join(tmp_path, "oracle_oracle_report.json"))
    assert report["status"] == "FAIL"
    assert report["guidance"]["gamma"] == "disabled"
    assert report["moment_test"] is None
    assert "worst probe" in caplog.text


def test_compare_oracle_reports_the_gap_for_mixtures(configs_dir, tmp_path):
    config = os.path.join(configs_dir, "solo", "mixture_2d_oracle_gap.json")
    assert main(["compare-oracle", config, "--output-dir", str(tmp_path), "--n-probes", "10"]) == 0
    report = get_data_from_json(os.path.join(tmp_path, "mixture_2d_oracle_gap_oracle_report.json"))
    assert report["status"] == "INFO" and report["mode"] == "informational"
    assert report["n_probes"] == 10
    assert report["max_deviation"] > 1e-6
    assert report["max_deviation"] >= report["mean_deviation"]

    assert main(["compare-oracle", config, "--output-dir", str(tmp_path), "--n-probes", "0"]) == 2


def test_metrics_command(tmp_path, capsys):
    a, b = os.path.join(tmp_path, "a.fsmx"), os.path.join(tmp_path, "b.fsmx")
    image = np.linspace(-0.5, 0.5, 16)
    write_tensor(a, image + 0.2)
    write_tensor(b, image)
    capsys.readouterr()
    assert main(["metrics", a, b, "--shape", "4", "4"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert_allclose([result["mse"], result["psnr"]], [0.04, 20.0])
    assert 0.0 < result["ssim"] < 1.0

    assert main(["metrics", a, b, "--shape", "5", "5"]) == 2


def test_arg_parser():
    parser = make_arg_parser()
    args = parser.parse_args(
        ["ablate", "run.json", "--sweep", "s.json", "--threads", "2", "--log-level", "debug"]
    )
    assert (args.command, args.config, args.sweep, args.threads, args.log_level) == (
        "ablate",
        "run.json",
        "s.json",
        2,
        "DEBUG",
    )
    assert parser.parse_args(["solve", "run.json"]).seed is None
    with pytest.raises(SystemExit):
        parser.parse_args([])
    with pytest.raises(SystemExit):
        parser.parse_args(["compare-oracle", "run.json", "--gamma", "sometimes"])
    with pytest.raises(SystemExit):
        parser.parse_args(["ablate", "run.json"])
