"""Declarative run configuration.

One TOML file describes a run end to end: vehicle, reward weights,
constraint corridor, transcription layout, learner hyperparameters, the
receding-horizon loop, and the scenario.  Unknown keys are rejected so a
typo never silently falls back to a default, and the fully materialized
configuration can be echoed back out for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import tomli

from .envmodel import CarFollowModel
from .harness import RhcConfig
from .learner import LearnerConfig
from .transcription import TranscriptionConfig
from .vehicle import ConstraintSpec, RewardWeights, VehicleParams

SCHEMA_VERSION = 1

# section name -> dataclass it populates
_SECTIONS = {
    "vehicle": VehicleParams,
    "weights": RewardWeights,
    "constraints": ConstraintSpec,
    "transcription": TranscriptionConfig,
    "learner": LearnerConfig,
    "rhc": RhcConfig,
}

_RUN_KEYS = {"seed", "out"}
_SCENARIO_KEYS = {"kind", "seed", "duration", "speed", "csv"}
_TRAINING_KEYS = {"duration", "demo_runs"}


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ScenarioSpec:
    """One lead-vehicle scenario: synthetic (kind+seed) or a CSV trace."""

    kind: str = "constant"
    seed: int = 0
    duration: float = 90.0
    speed: float = 15.0
    csv: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    transcription: TranscriptionConfig = field(default_factory=TranscriptionConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    rhc: RhcConfig = field(default_factory=RhcConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    training_duration: float = 90.0
    demo_runs: tuple = (12, 12, 12)  # baseline closed-loop runs per lead

    def model(self) -> CarFollowModel:
        return CarFollowModel(params=self.vehicle, weights=self.weights,
                              constraints=self.constraints,
                              config=self.transcription)

    def effective_dict(self) -> dict:
        """The fully materialized configuration, defaults included."""
        out = {"schema_version": SCHEMA_VERSION,
               "run": {"seed": self.seed, "out": self.out}}
        for name in _SECTIONS:
            obj = getattr(self, "transcription" if name == "transcription"
                          else name)
            d = {}
            for f in dataclasses.fields(obj):
                val = getattr(obj, f.name)
                if isinstance(val, np.ndarray):
                    val = val.tolist()
                if isinstance(val, tuple):
                    val = list(val)
                d[f.name] = val
            out[name] = d
        out["scenario"] = dataclasses.asdict(self.scenario)
        out["training"] = {"duration": self.training_duration,
                           "demo_runs": list(self.demo_runs)}
        return out


def _build_section(name: str, cls, data: dict, path):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(
            f"{path}: unknown key(s) {sorted(unknown)} in [{name}]")
    kwargs = {}
    for key, val in data.items():
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid [{name}] section: {exc}") from exc


def _check_keys(section: str, data: dict, allowed: set, path):
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"{path}: unknown key(s) {sorted(unknown)} in [{section}]")


def parse_config(data: dict, path="<config>") -> RunConfig:
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: unsupported schema_version {version!r} "
            f"(expected {SCHEMA_VERSION})")
    known = {"run", "scenario", "training", *_SECTIONS}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: {name!r} must be a table")

    run = data.get("run", {})
    _check_keys("run", run, _RUN_KEYS, path)
    kwargs = {"seed": int(run.get("seed", 0)),
              "out": str(run.get("out", "runs/out"))}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name], path)
    scen = data.get("scenario", {})
    _check_keys("scenario", scen, _SCENARIO_KEYS, path)
    if scen:
        kwargs["scenario"] = ScenarioSpec(**scen)
    training = data.get("training", {})
    _check_keys("training", training, _TRAINING_KEYS, path)
    if "duration" in training:
        kwargs["training_duration"] = float(training["duration"])
    if "demo_runs" in training:
        kwargs["demo_runs"] = tuple(int(x) for x in training["demo_runs"])
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return parse_config(data, path=path)


def write_effective_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.effective_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
