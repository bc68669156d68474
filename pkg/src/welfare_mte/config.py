"""Run configuration read from YAML."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import yaml

from . import worlds
from .curves import DEFAULT_WINDOW
from .dataset import read_dataset
from .design import INDEX_TERM
from .errors import ConfigurationError
from .estimation import PipelineConfig
from .structural import PopulationSpec

MODES = ("simulate", "estimate", "bootstrap", "diagnose", "counterfactual")
DEFAULT_BOOT = 500
TOP_KEYS = frozenset({"mode", "input", "output", "ineligible_input", "seed", "population", "estimator",
                      "diagnostics", "scenarios", "plot"})
DIAG_KEYS = frozenset({"segments", "gps_degree", "balance_instruments"})

_WORLDS = {
    "u_shaped": worlds.u_shaped_world,
    "homogeneous": worlds.homogeneous_world,
    "null_instrument": worlds.null_instrument_world,
    "ineligible": worlds.ineligible_world,
}


@dataclass
class RunConfig:
    mode: str = "estimate"
    input: Path | None = None
    output: Path = Path("out")
    seed: int = 0
    population: PopulationSpec | None = None
    estimator: PipelineConfig = field(default_factory=PipelineConfig)
    boot: int = DEFAULT_BOOT
    knot_candidates: tuple[int, ...] = (3, 4, 5, 6)
    segments: tuple = ("terciles", "quartiles")
    gps_degree: int = 1
    balance_instruments: tuple[str, ...] | None = None
    scenarios: list = field(default_factory=list)
    ineligible_input: Path | None = None
    plot: bool = True
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.boot < 0:
            raise ConfigurationError("bootstrap replicate count must be >= 0")

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, seed=None, output=None, knots=None, window=None, boot=None, mode=None, input=None) -> "RunConfig":
        cfg = replace(self)
        if mode is not None:
            cfg.mode = mode
        if seed is not None:
            cfg.seed = int(seed)
            if cfg.population is not None:
                cfg.population = cfg.population.replace(seed=int(seed))
        if output is not None:
            cfg.output = Path(output)
        if input is not None:
            cfg.input = Path(input)
        est = {}
        if knots is not None:
            est["n_knots"] = int(knots)
        if window is not None:
            est["window"] = tuple(window)
        if est:
            try:
                cfg.estimator = cfg.estimator.replace(**est)
            except ConfigurationError:
                raise
        if boot is not None:
            if boot < 0:
                raise ConfigurationError("--boot must be >= 0")
            cfg.boot = int(boot)
        cfg.__post_init__()
        return cfg


def parse_window(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(":")
    if len(parts) != 2:
        raise ConfigurationError(f"window must look like LO:HI, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigurationError(f"window must look like LO:HI, got {text!r}") from None
    if not 0 < lo < hi < 1:
        raise ConfigurationError(f"window must satisfy 0 < lo < hi < 1, got {lo}:{hi}")
    return lo, hi


def _tuple(v):
    if v is None:
        return None
    if isinstance(v, str):
        return (v,)
    return tuple(v)


def estimator_from_dict(obj: Mapping | None) -> PipelineConfig:
    obj = dict(obj or {})
    kw = {}
    if "knots" in obj:
        kw["n_knots"] = int(obj.pop("knots"))
    if "window" in obj:
        kw["window"] = parse_window(obj.pop("window"))
    if "instrument_columns" in obj:
        kw["instrument_columns"] = _tuple(obj.pop("instrument_columns"))
    if "interactions" in obj:
        inter = _tuple(obj.pop("interactions")) or ()
        kw["z_terms"] = (INDEX_TERM,) + tuple(f"{INDEX_TERM}*{t}" for t in inter)
    for key in ("x_terms", "z_terms", "beta_terms", "lambda_terms", "wage_terms", "selection_terms"):
        if key in obj:
            kw[key] = _tuple(obj.pop(key)) or ()
    for key in ("weighting", "wage_mode"):
        if key in obj:
            kw[key] = str(obj.pop(key))
    if "grid_size" in obj:
        kw["grid_size"] = int(obj.pop("grid_size"))
    obj.pop("bootstrap", None)
    obj.pop("knot_candidates", None)
    if obj:
        raise ConfigurationError(f"unknown estimator settings {sorted(obj)}")
    return PipelineConfig(**kw)


def population_from_dict(obj: Mapping) -> PopulationSpec:
    obj = dict(obj)
    if "world" in obj:
        name = obj.pop("world")
        if name not in _WORLDS:
            raise ConfigurationError(f"unknown world {name!r}; choose from {sorted(_WORLDS)}")
        return _WORLDS[name](**obj)
    return PopulationSpec.from_dict(obj)


def config_from_dict(obj: Mapping, base_dir=".") -> RunConfig:
    if not isinstance(obj, Mapping):
        raise ConfigurationError("config file must hold a mapping at the top level")
    obj = dict(obj)
    unknown = sorted(set(obj) - TOP_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config sections {unknown}; expected some of {sorted(TOP_KEYS)}")
    est = dict(obj.get("estimator") or {})
    diag = dict(obj.get("diagnostics") or {})
    unknown = sorted(set(diag) - DIAG_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown diagnostics settings {unknown}")
    kw = dict(base_dir=Path(base_dir))
    if "mode" in obj:
        kw["mode"] = str(obj["mode"])
    for key in ("input", "output", "ineligible_input"):
        if obj.get(key) is not None:
            kw[key] = Path(obj[key])
    if "seed" in obj:
        kw["seed"] = int(obj["seed"])
    if obj.get("population") is not None:
        pop = dict(obj["population"])
        pop.setdefault("seed", kw.get("seed", 0))
        kw["population"] = population_from_dict(pop)
    kw["estimator"] = estimator_from_dict(est)
    if "bootstrap" in est:
        kw["boot"] = int(est["bootstrap"])
    if "knot_candidates" in est:
        kw["knot_candidates"] = tuple(int(j) for j in est["knot_candidates"])
    if "segments" in diag:
        kw["segments"] = tuple(diag["segments"]) if isinstance(diag["segments"], list) else (diag["segments"],)
    if "gps_degree" in diag:
        kw["gps_degree"] = int(diag["gps_degree"])
    if "balance_instruments" in diag:
        kw["balance_instruments"] = _tuple(diag["balance_instruments"])
    if "plot" in obj:
        kw["plot"] = bool(obj["plot"])
    cfg = RunConfig(**kw)
    cfg.scenarios = [_scenario(s, cfg) for s in obj.get("scenarios") or []]
    return cfg


def _scenario(obj, cfg: RunConfig):
    from .counterfactual import ReformScenario

    obj = dict(obj)
    try:
        label = str(obj.pop("label"))
        p = float(obj.pop("p_target"))
    except KeyError as exc:
        raise ConfigurationError(f"scenario missing {exc}") from None
    sample = obj.pop("sample", None)
    if sample is not None:
        sample = read_dataset(cfg.resolve(sample))
    sc = ReformScenario(
        label, p,
        program=dict(obj.pop("program", {}) or {}),
        program_scale=dict(obj.pop("program_scale", {}) or {}),
        covariate_means=dict(obj.pop("covariate_means", {}) or {}),
        sample=sample,
    )
    if obj:
        raise ConfigurationError(f"unknown scenario settings {sorted(obj)}")
    return sc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        obj = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    return config_from_dict(obj, base_dir=path.parent)


__all__ = ["DEFAULT_WINDOW", "MODES", "RunConfig", "config_from_dict", "load_config", "parse_window"]
