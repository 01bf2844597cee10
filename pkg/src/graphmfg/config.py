"""Experiment configuration: one JSON file drives graph, model, initial data,
suite selection and numeric options.  Validation errors carry the line of the
offending key in the source file whenever it can be located.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import WeightedGraph, graph_from_dict, validate_simplex
from .models import GameSpec, make_game

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "SUITES"]

SUITES = ("interiority", "mfg", "master", "hjb", "nash")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line

    def render(self, path) -> str:
        anchor = f"{path}:{self.line}" if self.line else str(path)
        return f"{anchor}: {self}"


def _find_line(raw: str, key: str) -> int | None:
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if f'"{key}"' in line:
            return lineno
    return None


@dataclass
class ExperimentConfig:
    graph: WeightedGraph
    model: dict
    horizon: float
    initials: list          # [(t, mu array), ...]
    suites: list
    numerics: dict
    nash_options: dict
    output_dir: str
    raw: dict = field(default_factory=dict)

    def build_spec(self) -> GameSpec:
        m = self.model
        return make_game(self.graph, family=m["family"], p0=m["p0"],
                         c_f=m["cF"], c_t=m["cT"], horizon=self.horizon,
                         extended_beta=m["extended_beta"])

    @property
    def seed(self):
        return self.numerics.get("seed")


_NUMERIC_DEFAULTS = {
    "n_steps": None,        # None = stiffness-based default
    "dt": None,             # alternative to n_steps for the dynamics suite
    "tol": 1e-9,
    "seed": None,
    "mc_paths": 100000,
    "direct_grid": 384,
    "master_points": 3,
    "hjb_chords": 6,
    "h_t": None,
    "mc_enabled": True,
}

_NASH_DEFAULTS = {
    "torus_sweep": None,            # e.g. [4, 8, 16]
    "deviation_magnitudes": [-0.5, -0.25, 0.25, 0.5],
    "random_directions": 20,
    "time_modulated": 4,
}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw_text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(raw_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return parse_config(data, raw_text)


def parse_config(data: dict, raw_text: str = "") -> ExperimentConfig:
    def fail(msg, key):
        raise ConfigError(msg, line=_find_line(raw_text, key))

    if not isinstance(data, dict):
        raise ConfigError("top-level config must be an object")
    if "graph" not in data:
        fail("missing 'graph' section", "graph")
    try:
        graph = graph_from_dict(data["graph"])
    except (KeyError, ValueError, TypeError) as exc:
        key = "edges" if "edges" in str(exc) else "graph"
        fail(f"bad graph: {exc}", key)

    model_in = dict(data.get("model", {}))
    model = {
        "family": model_in.pop("family", "quadratic"),
        "p0": float(model_in.pop("p0", 2.0)),
        "cF": float(model_in.pop("cF", 1.0)),
        "cT": float(model_in.pop("cT", 1.0)),
        "extended_beta": float(model_in.pop("extended_beta", 0.0)),
    }
    if model_in:
        fail(f"unknown model keys: {sorted(model_in)}", "model")
    if model["family"] not in ("quadratic", "power"):
        fail(f"unknown model family {model['family']!r}", "family")
    if model["family"] == "power" and not (1.0 < model["p0"] <= 4.0):
        fail("power family needs p0 in (1, 4]", "p0")
    if model["cF"] <= 0.0:
        fail("cF must be > 0 (strictly concave coupling)", "cF")
    if model["cT"] < 0.0:
        fail("cT must be >= 0 (convex terminal cost)", "cT")

    horizon = float(data.get("horizon", 1.0))
    if horizon <= 0.0:
        fail("horizon must be positive", "horizon")

    initials = []
    for k, entry in enumerate(data.get("initials", [])):
        t = float(entry.get("t", 0.0))
        mu = np.asarray(entry["mu"], dtype=float)
        if mu.shape != (graph.n,):
            fail(f"initials[{k}]: mu must have length {graph.n}", "initials")
        try:
            validate_simplex(mu, eps=0.0)
        except ValueError as exc:
            fail(f"initials[{k}]: {exc}", "initials")
        if not 0.0 <= t < horizon:
            fail(f"initials[{k}]: t must lie in [0, horizon)", "initials")
        initials.append((t, mu))
    if not initials:
        fail("need at least one entry in 'initials'", "initials")

    suites_in = data.get("suites", "all")
    if suites_in == "all":
        suites = list(SUITES)
    else:
        if isinstance(suites_in, str):
            suites_in = [suites_in]
        suites = []
        for s in suites_in:
            if s not in SUITES:
                fail(f"unknown suite {s!r} (known: {', '.join(SUITES)})", "suites")
            suites.append(s)

    numerics = dict(_NUMERIC_DEFAULTS)
    for k, v in dict(data.get("numerics", {})).items():
        if k not in numerics:
            fail(f"unknown numerics key {k!r}", k)
        numerics[k] = v
    if numerics["tol"] <= 0:
        fail("tol must be positive", "tol")

    nash_options = dict(_NASH_DEFAULTS)
    for k, v in dict(data.get("nash", {})).items():
        if k not in nash_options:
            fail(f"unknown nash key {k!r}", k)
        nash_options[k] = v

    mc_active = "nash" in suites and (numerics["mc_enabled"] or
                                      nash_options["torus_sweep"] is not None)
    if "nash" in suites and numerics["seed"] is None:
        fail("the nash suite runs Monte Carlo sampling: 'seed' is required "
             "in numerics", "numerics")
    _ = mc_active

    output_dir = str(data.get("output_dir", "out"))
    return ExperimentConfig(graph=graph, model=model, horizon=horizon,
                            initials=initials, suites=suites, numerics=numerics,
                            nash_options=nash_options, output_dir=output_dir,
                            raw=data)
