"""Experiment configuration: YAML in, validated dataclass out."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import jsonschema
import yaml

from ..errors import SchemaError, UnknownExperimentError

EXPERIMENTS = ("shock_demo", "mollify_convergence", "zvonkin_verify", "moment_bounds",
               "weak_residual")


def load_schema():
    text = resources.files(__package__).joinpath("config_schema.json").read_text()
    return json.loads(text)


@dataclass
class ExperimentConfig:
    """One run. Fields not given in the file take the desk-scale defaults."""

    experiment: str
    seed: int
    drift: dict = field(default_factory=lambda: {"kind": "coalescing", "trunc": 1.0})
    sigma: float = 1.0
    sigmas: list = field(default_factory=lambda: [0.0, 1.0])
    u0: dict = field(default_factory=lambda: {"kind": "asymmetric-smooth"})
    grid: dict = field(default_factory=lambda: {"d": 1, "half_width": 2.0, "points": 401})
    dt: float = 1e-3
    T: float = 2.0
    paths: int = 200
    threads: int = 1
    times: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    lambdas: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    alphas: list = field(default_factory=lambda: [0.5, 0.9])
    rs: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    mollify: list = field(default_factory=lambda: [4, 8, 16])
    p_exp: list = field(default_factory=lambda: [2.0, 4.0])
    verdicts: Optional[list] = None
    output_dir: str = "runs/out"
    options: dict = field(default_factory=dict)

    @property
    def d(self):
        return int(self.grid.get("d", 1))

    @property
    def half_width(self):
        return float(self.grid.get("half_width", 2.0))

    @property
    def points(self):
        return int(self.grid.get("points", 401))

    def option(self, name, default):
        return self.options.get(name, default)

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_dict(self):
        """The fields that define the results; threads and output_dir do not enter."""
        data = self.to_dict()
        data.pop("threads")
        data.pop("output_dir")
        return data

    def hash(self):
        """SHA-256 of the canonical JSON form."""
        data = self.canonical_dict()
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def validate_config_dict(data):
    """Raise SchemaError / UnknownExperimentError for an invalid mapping."""
    if not isinstance(data, dict):
        raise SchemaError("configuration must be a mapping")
    name = data.get("experiment")
    if name is not None and name not in EXPERIMENTS:
        raise UnknownExperimentError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    if "seed" not in data:
        raise SchemaError("seed is mandatory (it is never defaulted)")
    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config invalid at {where}: {exc.message}") from None


def config_from_dict(data):
    validate_config_dict(data)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in data.items() if k in names})


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def dump_config(cfg, path=None, canonical=False):
    data = cfg.canonical_dict() if canonical else cfg.to_dict()
    data = {k: v for k, v in data.items() if v is not None}
    text = yaml.safe_dump(data, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def parse_config(text):
    return config_from_dict(yaml.safe_load(text))
