"""Experiment configuration read from INI files.

Every key has a default; a file only lists what it changes. Sections::

    [experiment]  id, seed, output, workers
    [model]       name and numeric parameters of a builtin model
    [grid]        n_steps, state_bins, state_lower, state_upper, quad_points
    [scenarios]   count, seed
    [picard]      damping, tol, max_iter, boundary_tol
    [simulate]    n, replicas, policy (equilibrium or constant:<index>)
    [nash]        n, replicas, class, mode
    [convergence] n_list, replicas, distance_order
    [converse]    n_list, replicas (one value or one per n), class
    [girsanov]    n, n_steps, replicas, beta_shift, clip, models, seeds, matrix_replicas,
                  calibration_replicas
    [spde]        n_list, replicas, n_steps, radius, beta_shift, model.<param>
    [consistency] particles, band
    [inclusion]   n, replicas
    [moments]     n_list, replicas, models
    [suites]      run, informational

List values are comma separated. Keys of the form ``model.<param>`` in
``[spde]`` override model parameters for that suite only.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..exceptions import ConfigurationError
from ..grids import StateGrid, TimeGrid
from ..model import ModelSpec, builtin_model

SUITES = ("martingale", "measure_change", "spde_scaling", "nu_flow", "consistency", "monotonicity",
          "class_inclusion", "moments")

DEFAULTS = {
    "experiment": {"id": "default", "seed": 0, "output": "out", "workers": 1},
    "model": {"name": "lq_monotone"},
    "grid": {"n_steps": 25, "state_bins": 61, "state_lower": -7.0, "state_upper": 8.0, "quad_points": 7},
    "scenarios": {"count": 8, "seed": 11},
    "picard": {"damping": 0.5, "tol": 1e-3, "max_iter": 50, "boundary_tol": 0.01},
    "simulate": {"n": 64, "replicas": 20, "policy": "equilibrium"},
    "nash": {"n": 64, "replicas": 200, "class": "SClosedLoop", "mode": "per_player_max"},
    "convergence": {"n_list": [16, 256], "replicas": 40, "distance_order": 1.0},
    "converse": {"n_list": [16, 1024], "replicas": [800, 100], "class": "SClosedLoop"},
    "girsanov": {"n": 8, "n_steps": 25, "replicas": 50_000, "beta_shift": 0.5, "clip": 2.0,
                 "models": ["lq_monotone", "lq_crowd", "bounded_tanh"], "seeds": [1, 2, 3],
                 "matrix_replicas": 20_000, "calibration_replicas": 20_000},
    "spde": {"n_list": [16, 64, 256, 1024], "replicas": 400, "n_steps": 100, "radius": 3.0,
             "beta_shift": 0.25, "model": {"gamma": 0.25}},
    "consistency": {"particles": 2000, "band": 3.0},
    "inclusion": {"n": 64, "replicas": 400},
    "moments": {"n_list": [8, 1024], "replicas": 20, "models": ["lq_monotone", "lq_crowd", "bounded_tanh"]},
    "suites": {"run": list(SUITES), "informational": []},
}

_LISTS = {("convergence", "n_list"), ("converse", "n_list"), ("converse", "replicas"), ("girsanov", "models"),
          ("girsanov", "seeds"), ("spde", "n_list"), ("moments", "n_list"), ("moments", "models"),
          ("suites", "run"), ("suites", "informational")}
_STRINGS = {("experiment", "id"), ("experiment", "output"), ("simulate", "policy"), ("nash", "class"),
            ("nash", "mode"), ("converse", "class"), ("girsanov", "models"), ("moments", "models"),
            ("suites", "run"), ("suites", "informational")}
# keys that do not change results and stay out of the hash
_UNHASHED = {("experiment", "output"), ("experiment", "workers")}


def _parse_scalar(text: str, section: str, key: str):
    text = text.strip()
    if (section, key) in _STRINGS:
        return text
    if text.lower() in ("none", ""):
        return None
    try:
        value = float(text)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key} = {text!r} is not numeric") from exc
    return int(value) if value.is_integer() and "." not in text and "e" not in text.lower() else value


def _parse(section: str, key: str, text: str):
    if (section, key) in _LISTS:
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return [_parse_scalar(t, section, key) for t in items]
    return _parse_scalar(text, section, key)


def git_blob_hash(data: bytes) -> str:
    """SHA-1 of ``blob <len>\\0<data>``, as git hashes file contents."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class ExperimentConfig:
    """Resolved configuration: defaults overlaid with a file and command-line overrides."""

    values: dict

    @classmethod
    def default(cls) -> "ExperimentConfig":
        cfg = cls(copy.deepcopy(DEFAULTS))
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path, seed: Optional[int] = None, output=None, workers: Optional[int] = None):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(Path(path), encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_parser(parser, seed=seed, output=output, workers=workers)

    @classmethod
    def from_string(cls, text: str, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        return cls.from_parser(parser, **overrides)

    @classmethod
    def from_parser(cls, parser, seed=None, output=None, workers=None) -> "ExperimentConfig":
        values = copy.deepcopy(DEFAULTS)
        for section in parser.sections():
            if section not in values:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if section == "model":
                    values["model"][key] = text.strip() if key == "name" else _parse_scalar(text, section, key)
                elif section == "spde" and key.startswith("model."):
                    values["spde"]["model"][key[len("model."):]] = _parse_scalar(text, section, key)
                elif key not in values[section]:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                else:
                    values[section][key] = _parse(section, key, text)
        if seed is not None:
            values["experiment"]["seed"] = int(seed)
        if output is not None:
            values["experiment"]["output"] = str(output)
        if workers is not None:
            values["experiment"]["workers"] = int(workers)
        cfg = cls(values)
        cfg.check()
        return cfg

    def check(self) -> None:
        v = self.values
        for section, key in (("convergence", "n_list"), ("converse", "n_list"), ("spde", "n_list"),
                             ("moments", "n_list")):
            ns = v[section][key]
            if not ns or any(int(n) != n or n < 1 for n in ns):
                raise ConfigurationError(f"[{section}] {key} must list positive integers")
            if any(b <= a for a, b in zip(ns, ns[1:])):
                raise ConfigurationError(f"[{section}] {key} must be ascending")
        reps = v["converse"]["replicas"]
        if len(reps) not in (1, len(v["converse"]["n_list"])):
            raise ConfigurationError("[converse] replicas needs one value or one per n")
        for name in v["suites"]["run"] + v["suites"]["informational"]:
            if name not in SUITES:
                raise ConfigurationError(f"unknown suite {name!r}; choose from {SUITES}")
        if int(v["experiment"]["workers"]) < 1:
            raise ConfigurationError("workers must be at least 1")
        for key in ("seed",):
            if not isinstance(v["experiment"][key], int):
                raise ConfigurationError("[experiment] seed must be an integer")
        if not (0 < v["picard"]["damping"] <= 1):
            raise ConfigurationError("[picard] damping must lie in (0, 1]")
        self.model()  # parameter validation
        self.time_grid()

    # -- accessors -------------------------------------------------------

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["experiment"]["seed"])

    @property
    def experiment_id(self) -> str:
        return str(self.values["experiment"]["id"])

    @property
    def output(self) -> Path:
        return Path(self.values["experiment"]["output"])

    @property
    def workers(self) -> int:
        return int(self.values["experiment"]["workers"])

    def model(self, overrides: Optional[dict] = None, name: Optional[str] = None) -> ModelSpec:
        params = {k: val for k, val in self.values["model"].items() if k != "name"}
        if name is not None and name != self.values["model"]["name"]:
            params = {}
        params.update(overrides or {})
        return builtin_model(name or self.values["model"]["name"], params)

    def time_grid(self, n_steps: Optional[int] = None) -> TimeGrid:
        return TimeGrid(self.model().horizon, int(n_steps or self.values["grid"]["n_steps"]))

    def state_grid(self, spec: Optional[ModelSpec] = None) -> StateGrid:
        from ..mfe import default_state_grid
        g = self.values["grid"]
        spec = spec or self.model()
        if g["state_lower"] is None or g["state_upper"] is None:
            return default_state_grid(spec, bins=int(g["state_bins"]))
        d = spec.dim
        return StateGrid.centered([0.5 * (g["state_lower"] + g["state_upper"])] * d,
                                  [0.5 * (g["state_upper"] - g["state_lower"])] * d, int(g["state_bins"]))

    def canonical(self) -> str:
        hashed = copy.deepcopy(self.values)
        for section, key in _UNHASHED:
            hashed[section].pop(key, None)
        return json.dumps(hashed, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return git_blob_hash(self.canonical().encode("utf-8"))

    def to_ini(self) -> str:
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            for key, val in items.items():
                if section == "spde" and key == "model":
                    for mk, mv in val.items():
                        lines.append(f"model.{mk} = {mv}")
                    continue
                if isinstance(val, list):
                    val = ", ".join(str(x) for x in val)
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)
