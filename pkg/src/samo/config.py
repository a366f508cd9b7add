"""Strict experiment-config parsing: one JSON document describes a run.

Unknown keys are rejected and every error names the offending field, so a
config file is a complete, diffable record of an experiment.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

from .core import ConfigError, MultiTaskProblem
from .optimizer import OptimizerConfig
from .problems import MlpMultiTaskProblem, ToyProblem
from .sam import SamConfig
from .weighting import WeightingMethod, get_method

_REQUIRED = object()


class _Fields:
    """Pops typed keys from one JSON object and rejects leftovers."""

    def __init__(self, data: Any, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"'{path}' must be a JSON object")
        self._data = dict(data)
        self._path = path

    def _name(self, key):
        return f"{self._path}.{key}" if self._path else key

    def take(self, key, kind, default=_REQUIRED, choices=None):
        if key not in self._data:
            if default is _REQUIRED:
                raise ConfigError(f"missing required field '{self._name(key)}'")
            return default
        value = self._data.pop(key)
        name = self._name(key)
        if kind == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{name}' must be a number, got {value!r}")
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError(f"'{name}' must be finite, got {value!r}")
        elif kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"'{name}' must be an integer, got {value!r}")
        elif kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"'{name}' must be a boolean, got {value!r}")
        elif kind == "str":
            if not isinstance(value, str):
                raise ConfigError(f"'{name}' must be a string, got {value!r}")
        elif kind == "list":
            if not isinstance(value, list):
                raise ConfigError(f"'{name}' must be a list, got {value!r}")
        elif kind == "object":
            pass
        if choices is not None and value not in choices:
            raise ConfigError(f"'{name}' must be one of {sorted(choices)}, got {value!r}")
        return value

    def subsection(self, key):
        return _Fields(self._data.pop(key, None), self._name(key))

    def finish(self):
        if self._data:
            extra = sorted(self._data)
            raise ConfigError(f"unknown field '{self._name(extra[0])}'")


@dataclass
class DiagnosticsConfig:
    cosine_every: int = 0
    spectrum_at_end: bool = False
    k: int = 5


@dataclass
class ExperimentConfig:
    problem_kind: str
    problem_args: dict
    weighting: str
    sam: SamConfig
    lr: float
    steps: int
    schedule: str
    halve_fraction: float
    momentum: float
    record_every: int
    shared_scope: str | None
    seed: int
    output_dir: str
    diagnostics: DiagnosticsConfig
    baselines: list[float] | None
    raw: dict = field(default_factory=dict, repr=False)

    def build_problem(self) -> MultiTaskProblem:
        if self.problem_kind == "toy":
            return ToyProblem(start=tuple(self.problem_args.get("start", (-6.0, 1.0))))
        return MlpMultiTaskProblem(
            seed=self.seed,
            n_tasks=self.problem_args["tasks"],
            trunk_sizes=self.problem_args["trunk"],
            n_samples=self.problem_args["samples"],
            conflict_angle_deg=self.problem_args["conflict_angle"],
            batch_size=self.problem_args.get("batch_size"),
        )

    def build_weighting(self) -> WeightingMethod:
        return get_method(self.weighting)

    def optimizer_config(self) -> OptimizerConfig:
        scope = self.shared_scope
        if scope is None:
            scope = "trunk_only" if self.problem_kind == "mlp" else "all"
        return OptimizerConfig(
            lr=self.lr, steps=self.steps, schedule=self.schedule,
            halve_fraction=self.halve_fraction, momentum=self.momentum,
            seed=self.seed, record_every=self.record_every,
            record_params=self.problem_kind == "toy", shared_scope=scope)

    def resolved_output_dir(self) -> str:
        root = os.environ.get("SAMO_OUTPUT_ROOT")
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir

    def echo(self) -> dict:
        return self.raw


def _parse_problem(fields: _Fields) -> tuple[str, dict]:
    kind = fields.take("kind", "str", default="toy", choices=("toy", "mlp"))
    if kind == "toy":
        start = fields.take("start", "list", default=[-6.0, 1.0])
        if len(start) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                      for v in start):
            raise ConfigError("'problem.start' must be a list of two numbers")
        args = {"start": [float(v) for v in start]}
    else:
        tasks = fields.take("tasks", "int", default=3)
        trunk = fields.take("trunk", "list", default=[8, 16, 8])
        if not trunk or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1
                                for v in trunk):
            raise ConfigError("'problem.trunk' must be a list of positive integers")
        samples = fields.take("samples", "int", default=64)
        angle = fields.take("conflict_angle", "number", default=120.0)
        batch = fields.take("batch_size", "int", default=None)
        args = {"tasks": tasks, "trunk": [int(v) for v in trunk], "samples": samples,
                "conflict_angle": angle, "batch_size": batch}
    fields.finish()
    return kind, args


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config document and resolve all defaults."""
    top = _Fields(data, "")

    problem_kind, problem_args = _parse_problem(top.subsection("problem"))
    weighting = top.take("weighting", "str", default="ls")

    sam_fields = top.subsection("sam")
    sam_kwargs = dict(
        mode=sam_fields.take("mode", "str", default="off"),
        rho=sam_fields.take("rho", "number", default=0.001),
        alpha=sam_fields.take("alpha", "number", default=0.5),
        mu=sam_fields.take("mu", "number", default=0.01),
        estimator=sam_fields.take("estimator", "str", default="spsa"),
        normalization=sam_fields.take("normalization", "str", default="layerwise"),
        spsa_samples=sam_fields.take("spsa_samples", "int", default=1),
        parallel=sam_fields.take("parallel", "bool", default=False),
    )
    sam_fields.finish()
    sam = SamConfig(**sam_kwargs)

    opt_fields = top.subsection("optimizer")
    lr = opt_fields.take("lr", "number", default=1e-4)
    steps = opt_fields.take("steps", "int", default=1000)
    schedule = opt_fields.take("schedule", "str", default="halve_at")
    halve_fraction = opt_fields.take("halve_fraction", "number", default=0.5)
    momentum = opt_fields.take("momentum", "number", default=0.0)
    record_every = opt_fields.take("record_every", "int", default=1)
    shared_scope = opt_fields.take("shared_scope", "str", default=None)
    opt_fields.finish()

    diag_fields = top.subsection("diagnostics")
    diagnostics = DiagnosticsConfig(
        cosine_every=diag_fields.take("cosine_every", "int", default=0),
        spectrum_at_end=diag_fields.take("spectrum_at_end", "bool", default=False),
        k=diag_fields.take("k", "int", default=5),
    )
    diag_fields.finish()
    if diagnostics.cosine_every < 0:
        raise ConfigError("'diagnostics.cosine_every' must be >= 0")
    if diagnostics.k < 1:
        raise ConfigError("'diagnostics.k' must be >= 1")

    seed = top.take("seed", "int", default=0)
    output_dir = top.take("output_dir", "str", default="run_output")
    baselines = top.take("baselines", "list", default=None)
    if baselines is not None:
        if not baselines or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                    for v in baselines):
            raise ConfigError("'baselines' must be a non-empty list of numbers")
        baselines = [float(v) for v in baselines]
    top.finish()

    cfg = ExperimentConfig(
        problem_kind=problem_kind, problem_args=problem_args, weighting=weighting,
        sam=sam, lr=lr, steps=steps, schedule=schedule,
        halve_fraction=halve_fraction, momentum=momentum,
        record_every=record_every, shared_scope=shared_scope, seed=seed,
        output_dir=output_dir, diagnostics=diagnostics, baselines=baselines,
        raw=canonical_dict(data))
    # surface invalid optimizer fields now rather than at run time
    cfg.optimizer_config()
    cfg.build_weighting()
    return cfg


def canonical_dict(data: dict) -> dict:
    return json.loads(json.dumps(data, sort_keys=True))


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    if overrides:
        data = apply_overrides(data, overrides)
    return parse_config(data)


_OVERRIDE_PATHS = {
    "seed": ("seed",),
    "output_dir": ("output_dir",),
    "weighting": ("weighting",),
    "steps": ("optimizer", "steps"),
    "lr": ("optimizer", "lr"),
    "rho": ("sam", "rho"),
    "alpha": ("sam", "alpha"),
    "mu": ("sam", "mu"),
    "conflict_angle": ("problem", "conflict_angle"),
}


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Apply scalar CLI overrides onto a raw config document."""
    data = json.loads(json.dumps(data))
    for key, value in overrides.items():
        if value is None:
            continue
        path = _OVERRIDE_PATHS.get(key)
        if path is None:
            raise ConfigError(f"no override path for '{key}'")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override '{'.'.join(path)}'")
        node[path[-1]] = value
    return data
