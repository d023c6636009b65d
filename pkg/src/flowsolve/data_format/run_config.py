"""JSON run configuration.

A run config has the blocks ``path``, ``model``, ``operator``, ``guidance``,
``solver`` and ``observation`` plus experiment metadata. Parsing normalizes
every block (defaults filled in, enums spelled out), so
``RunConfig.from_dict(cfg.to_dict())`` reproduces ``cfg`` exactly.
"""

import copy
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from flowsolve.data_format.file_io import get_data_from_json, read_array, write_json
from flowsolve.guidance.pigdm import GuidanceConfig
from flowsolve.model.denoisers import denoiser_to_vf
from flowsolve.model.gmm import gmm_denoiser, load_gmm
from flowsolve.operators.linear_operators import OPERATOR_KEYS, operator_from_dict
from flowsolve.paths.schedules import path_from_dict
from flowsolve.solver.sampler import InitMode, Lift, SolveRun
from flowsolve.utils.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

TOP_KEYS = {
    "name",
    "output_dir",
    "repeat",
    "image_shape",
    "channels",
    "write_pgm",
    "path",
    "model",
    "operator",
    "guidance",
    "solver",
    "observation",
    "oracle",
}
REQUIRED_KEYS = {"name", "model", "operator", "observation"}
MODEL_KEYS = {"prior", "native_path", "parameterization"}
PARAMETERIZATIONS = ("denoiser", "vector_field")
SOLVER_DEFAULTS = {
    "t0": 0.2,
    "n_steps": 100,
    "init_mode": InitMode.Y.value,
    "lift": Lift.IDENTITY.value,
    "seed": 0,
    "end_epsilon": 1e-3,
    "record_trajectory": False,
}
OBSERVATION_KEYS = {"values", "path", "ground_truth", "seed"}
ORACLE_DEFAULTS = {
    "n_probes": 100,
    "t_min": 0.05,
    "t_max": 0.95,
    "tolerance": 1e-6,
    "moment_runs": 2000,
    "moment_steps": 1000,
    "moment_mean_margin": 0.01,
    "moment_cov_tolerance": 0.02,
}
DEFAULT_PATH = {"kind": "cond_ot", "params": {}}


def _check_keys(block, allowed, what):
    if not isinstance(block, dict):
        raise ConfigurationError(f"{what} block must be a JSON object, got {type(block).__name__}")
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {what} block: {sorted(unknown)}")


def _enum_value(enum_cls, value, what):
    try:
        return enum_cls(value).value
    except ValueError as err:
        raise ConfigurationError(
            f"unknown {what} {value!r}, expected one of {[m.value for m in enum_cls]}"
        ) from err


def _with_defaults(block, defaults, what):
    block = {} if block is None else block
    _check_keys(block, defaults, what)
    out = dict(defaults)
    out.update(block)
    return out


@dataclass(frozen=True, eq=False)
class RunConfig:
    """A validated run configuration.

    ``data`` holds the normalized JSON document; ``base_dir`` is where relative
    file references are resolved.
    """

    data: dict
    base_dir: str = field(default=".")

    @classmethod
    def from_dict(cls, data, base_dir="."):
        _check_keys(data, TOP_KEYS, "top-level")
        missing = REQUIRED_KEYS - set(data)
        if missing:
            raise ConfigurationError(f"run config is missing {sorted(missing)}")
        data = copy.deepcopy(data)

        norm = {
            "name": str(data["name"]),
            "output_dir": str(data.get("output_dir", "output")),
            "repeat": int(data.get("repeat", 1)),
            "image_shape": None if data.get("image_shape") is None else [int(n) for n in data["image_shape"]],
            "channels": int(data.get("channels", 1)),
            "write_pgm": bool(data.get("write_pgm", False)),
        }
        if norm["repeat"] < 1:
            raise ConfigurationError(f"repeat must be >= 1, got {norm['repeat']}")

        norm["path"] = path_from_dict(data.get("path", DEFAULT_PATH)).to_dict()

        model = data["model"]
        _check_keys(model, MODEL_KEYS, "model")
        if "prior" not in model:
            raise ConfigurationError("model block needs a 'prior'")
        parameterization = model.get("parameterization", "denoiser")
        if parameterization not in PARAMETERIZATIONS:
            raise ConfigurationError(f"unknown model parameterization {parameterization!r}")
        native = model.get("native_path", norm["path"])
        norm["model"] = {
            "prior": model["prior"],
            "native_path": path_from_dict(native).to_dict(),
            "parameterization": parameterization,
        }

        operator = data["operator"]
        _check_keys(operator, {"kind"} | set().union(*OPERATOR_KEYS.values()), "operator")
        norm["operator"] = dict(operator)
        norm["guidance"] = GuidanceConfig.from_dict(data.get("guidance", {})).to_dict()

        solver = _with_defaults(data.get("solver"), SOLVER_DEFAULTS, "solver")
        solver["t0"] = float(solver["t0"])
        solver["n_steps"] = int(solver["n_steps"])
        solver["init_mode"] = _enum_value(InitMode, solver["init_mode"], "init_mode")
        solver["lift"] = _enum_value(Lift, solver["lift"], "lift")
        solver["seed"] = int(solver["seed"])
        solver["end_epsilon"] = float(solver["end_epsilon"])
        solver["record_trajectory"] = bool(solver["record_trajectory"])
        norm["solver"] = solver

        observation = data["observation"]
        _check_keys(observation, OBSERVATION_KEYS, "observation")
        if ("values" in observation) and ("path" in observation):
            raise ConfigurationError("observation takes either 'values' or 'path', not both")
        if not {"values", "path", "ground_truth"} & set(observation):
            raise ConfigurationError(
                "observation needs 'values', 'path' or a 'ground_truth' to simulate from"
            )
        norm["observation"] = dict(observation)

        norm["oracle"] = _with_defaults(data.get("oracle"), ORACLE_DEFAULTS, "oracle")
        return cls(data=norm, base_dir=os.fspath(base_dir))

    @classmethod
    def from_file(cls, filename):
        data = get_data_from_json(filename)
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(filename)))

    def to_dict(self):
        return copy.deepcopy(self.data)

    def save(self, filename):
        write_json(self.to_dict(), filename)

    def with_overrides(self, seed=None, output_dir=None, solver=None, guidance=None):
        """A new config with selected fields replaced, validated again."""
        data = self.to_dict()
        if seed is not None:
            data["solver"]["seed"] = int(seed)
        if output_dir is not None:
            data["output_dir"] = os.fspath(output_dir)
        data["solver"].update(solver or {})
        data["guidance"].update(guidance or {})
        return RunConfig.from_dict(data, base_dir=self.base_dir)

    @property
    def name(self):
        return self.data["name"]

    @property
    def seed(self):
        return self.data["solver"]["seed"]

    @property
    def image_shape(self):
        shape = self.data["image_shape"]
        return None if shape is None else tuple(shape)

    @property
    def output_dir(self):
        out = self.data["output_dir"]
        return out if os.path.isabs(out) else os.path.join(self.base_dir, out)

    def resolve(self, filename):
        filename = os.fspath(filename)
        return filename if os.path.isabs(filename) else os.path.join(self.base_dir, filename)

    def build_path(self):
        return path_from_dict(self.data["path"])

    def build_prior(self):
        prior = load_gmm(self.data["model"]["prior"], base_dir=self.base_dir)
        if self.image_shape is not None:
            expected = self.data["channels"] * int(np.prod(self.image_shape))
            if expected != prior.dim:
                raise ShapeMismatchError((expected,), (prior.dim,), what="prior dimension vs image_shape")
        return prior

    def build_model(self, prior=None):
        """The pretrained model: the prior's exact denoiser on its native path."""
        prior = self.build_prior() if prior is None else prior
        native = path_from_dict(self.data["model"]["native_path"])
        denoiser = gmm_denoiser(prior, native)
        if self.data["model"]["parameterization"] == "vector_field":
            return denoiser_to_vf(denoiser, native)
        return denoiser

    def build_operator(self, dim):
        return operator_from_dict(
            self.data["operator"],
            dim,
            image_shape=self.image_shape,
            channels=self.data["channels"],
            base_dir=self.base_dir,
        )

    def build_guidance(self):
        return GuidanceConfig.from_dict(self.data["guidance"])

    def observation(self, prior, op, rng):
        """The observation y and, when known, the ground truth x_1.

        A ground truth without explicit values is pushed through the operator
        and perturbed with ``sigma_y`` noise from ``rng``.
        """
        spec = self.data["observation"]
        truth = None
        if "ground_truth" in spec:
            if spec["ground_truth"] == "prior":
                truth = prior.sample(1, rng)[0]
            else:
                truth = read_array(spec["ground_truth"], base_dir=self.base_dir).ravel()
            if truth.size != op.n_in:
                raise ShapeMismatchError((op.n_in,), truth.shape, what="ground truth")
        if "values" in spec:
            y = np.asarray(spec["values"], dtype=float).ravel()
        elif "path" in spec:
            y = read_array(spec["path"], base_dir=self.base_dir).ravel()
        else:
            sigma_y = self.data["guidance"]["sigma_y"]
            y = op.apply(truth) + sigma_y * rng.standard_normal(op.n_out)
        if y.size != op.n_out:
            raise ShapeMismatchError((op.n_out,), y.shape, what="observation")
        return y, truth

    def solve_run(self, model, op, y, seed=None):
        solver = self.data["solver"]
        return SolveRun(
            path=self.build_path(),
            model=model,
            operator=op,
            y=y,
            guidance=self.build_guidance(),
            t0=solver["t0"],
            n_steps=solver["n_steps"],
            init_mode=solver["init_mode"],
            lift=solver["lift"],
            seed=solver["seed"] if seed is None else seed,
            end_epsilon=solver["end_epsilon"],
            record_trajectory=solver["record_trajectory"],
        )


