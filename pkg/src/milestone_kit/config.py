"""Experiment configuration: JSON schema validation and object construction.

A config file drives the whole pipeline: model, grid, A/B regions, milestone
source, sampling budgets, and the target pair. Every stochastic run requires
an explicit seed, so reports are reproducible byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .committor import (
    Ball, HalfSpace, committor_milestones, density_field,
    solve_backward_committor,
)
from .grids import Grid
from .milestones import MilestoneSet, linear_milestones
from .model import BUILTIN_MODELS, DiffusionModel, make_benchmark
from .surfaces import Curve, identity_rescale, logistic_rescale, milestones_from_curve


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


def _require(cfg: dict, key: str, kind, where: str):
    if key not in cfg:
        raise ConfigError(f"missing required key '{where}.{key}'")
    val = cfg[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"'{where}.{key}' must be a number")
        return float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"'{where}.{key}' must be {kind.__name__}")
    return val


@dataclass
class ExperimentConfig:
    """Validated configuration plus lazily built objects."""

    raw: dict
    base_dir: str = "."
    _model: Optional[DiffusionModel] = field(default=None, repr=False)
    _grid: Optional[Grid] = field(default=None, repr=False)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        cfg = cls(raw=raw, base_dir=os.path.dirname(os.path.abspath(path)))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        cfg = self.raw
        model = _require(cfg, "model", dict, "")
        name = _require(model, "name", str, "model")
        if name not in BUILTIN_MODELS:
            raise ConfigError(f"unknown model '{name}'; expected one of {BUILTIN_MODELS}")
        _require(model, "beta", float, "model")
        sampling = _require(cfg, "sampling", dict, "")
        _require(sampling, "dt", float, "sampling")
        if "seed" not in sampling:
            raise ConfigError("missing required key 'sampling.seed': runs must "
                              "be seeded explicitly")
        mil = cfg.get("milestones")
        if mil is not None:
            source = _require(mil, "source", str, "milestones")
            if source not in ("linear", "committor", "curve"):
                raise ConfigError("milestones.source must be linear|committor|curve")
            if source == "curve" and "file" in mil:
                path = os.path.join(self.base_dir, mil["file"])
                if not os.path.exists(path):
                    raise ConfigError(f"curve file not found: {path}")

    # ---- accessors --------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["sampling"]["seed"])

    @property
    def dt(self) -> float:
        return float(self.raw["sampling"]["dt"])

    @property
    def workers(self) -> int:
        return int(self.raw["sampling"].get("workers", 1))

    def model(self) -> DiffusionModel:
        if self._model is None:
            m = self.raw["model"]
            self._model = make_benchmark(m["name"], beta=float(m["beta"]),
                                         curl=float(m.get("curl", 0.0)))
            if "box" in m:
                import dataclasses

                box = tuple(tuple(float(v) for v in b) for b in m["box"])
                self._model = dataclasses.replace(self._model, box=box)
        return self._model

    def grid(self) -> Grid:
        if self._grid is None:
            model = self.model()
            g = self.raw.get("grid", {})
            box = g.get("box", model.box)
            nodes = g.get("nodes", [257] * model.dim)
            if isinstance(nodes, int):
                nodes = [nodes] * model.dim
            self._grid = Grid(lo=tuple(float(b[0]) for b in box),
                              hi=tuple(float(b[1]) for b in box),
                              shape=tuple(int(n) for n in nodes))
        return self._grid

    def region(self, key: str):
        ab = self.raw.get("ab")
        if ab is None or key not in ab:
            raise ConfigError(f"missing 'ab.{key}' region")
        spec = ab[key]
        kind = _require(spec, "type", str, f"ab.{key}")
        if kind == "ball":
            return Ball(tuple(float(c) for c in spec["center"]),
                        float(spec["radius"]))
        if kind == "halfspace":
            return HalfSpace(int(spec["axis"]), float(spec["threshold"]),
                             int(spec["side"]))
        raise ConfigError(f"unknown region type '{kind}'")

    def levels(self) -> np.ndarray:
        mil = self.raw["milestones"]
        spec = mil.get("levels")
        if isinstance(spec, dict):
            count = int(spec["count"])
            if spec.get("spacing", "uniform_in_f") != "uniform_in_f":
                raise ConfigError("only uniform_in_f spacing is supported")
            return np.linspace(1.0, 0.0, count + 2)[1:-1]
        return np.asarray([float(z) for z in spec])

    def milestones(self):
        """Build (MilestoneSet, meshes-or-None, CommittorField-or-None)."""
        mil = self.raw.get("milestones")
        if mil is None:
            raise ConfigError("missing 'milestones' section")
        source = mil["source"]
        model = self.model()
        if source == "linear":
            pts = [float(p) for p in mil["points"]]
            return linear_milestones(pts, axis=int(mil.get("axis", 0)),
                                     dim=model.dim), None, None
        if source == "committor":
            grid = self.grid()
            rho = density_field(model, grid)
            fld = solve_backward_committor(model, rho, self.region("A"),
                                           self.region("B"), grid,
                                           advection=mil.get("advection", "auto"))
            mset, meshes = committor_milestones(fld, self.levels())
            return mset, meshes, fld
        if source == "curve":
            if "file" in mil:
                data = np.loadtxt(os.path.join(self.base_dir, mil["file"]),
                                  delimiter=",", ndmin=2)
                pts = data[:, 1:] if data.shape[1] == model.dim + 1 else data
            else:
                pts = np.asarray(mil["points"], dtype=float)
            curve = Curve(pts)
            rescale = identity_rescale
            if mil.get("rescale", "identity") == "logistic":
                rescale = logistic_rescale(float(mil.get("steepness", 8.0)))
            mset = milestones_from_curve(curve, rescale,
                                         float(mil.get("delta", 0.1)),
                                         self.levels(), self.grid())
            return mset, None, None
        raise ConfigError(f"unknown milestone source '{source}'")

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_report(path, payload: dict, raw_config: dict) -> None:
    """Deterministic JSON report: embeds config hash and package version;
    wall-clock metadata goes to a separate sidecar file."""
    from . import __version__

    body = dict(payload)
    body["config_hash"] = config_hash(raw_config)
    body["version"] = __version__
    with open(path, "w") as fh:
        json.dump(body, fh, sort_keys=True, indent=2)
        fh.write("\n")


def dump_run_meta(path, extra: Optional[dict] = None) -> None:
    import platform
    import time

    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "host": platform.node(), "python": platform.python_version()}
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
