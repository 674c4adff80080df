"""Scenario files: a versioned JSON schema mapped onto nested dataclasses.

Unknown keys are rejected at every level so typos fail fast. Every random
choice in a run is driven by a seed stored in the scenario.
"""
from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from tdoanet.errors import ConfigError

SCHEMA_VERSION = 1


def derive_rng(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent stream for ``(seed, tag, index)``.

    Streams are keyed by position rather than drawn in sequence, so adding
    trials or components never changes the streams of existing ones.
    """
    key = (zlib.crc32(tag.encode("utf-8")), int(index))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "NCV"
    T: float = 0.02
    process_noise_std: float = 0.1  # Q_q, std of each input channel


@dataclass(frozen=True)
class GeometrySpec:
    n: int = 10
    positions: Optional[list] = None  # explicit n x 3, overrides the random draw
    box: tuple = (0.0, 10.0)
    seed: int = 0


@dataclass(frozen=True)
class GraphSpec:
    kind: str = "ring"  # ring | line | complete | directed_cycle | custom
    edges: Optional[list] = None  # custom: [[j, i], ...] meaning j -> i


@dataclass(frozen=True)
class DelaySpec:
    kind: str = "none"  # none | fixed | random
    tau_max: int = 0
    seed: int = 0
    links: Optional[list] = None  # fixed: [[j, i, tau], ...]


@dataclass(frozen=True)
class GainSpec:
    method: str = "auto"
    rho_target: float = 0.996
    restarts: int = 4
    init_scale: float = 1e-3
    delay_design: Optional[int] = None  # None: the scenario's max delay
    delay_samples: int = 4
    seed: int = 0


@dataclass(frozen=True)
class FaultEntry:
    sensor: int
    onset: int
    vector: list


@dataclass(frozen=True)
class DetectorSpec:
    enabled: bool = False
    kappa: float = 0.05
    theta: int = 10
    dof: str = "effective"  # effective | nominal
    calibration_trials: int = 2
    burn_in: int = 1500


@dataclass(frozen=True)
class KfSpec:
    meas_std: list = field(default_factory=lambda: [0.05, 0.5])  # R_r grid
    process_std: list = field(default_factory=lambda: [0.5, 5.0])  # Q_q grid
    init_std: float = 1.0  # initial error std per state, also P0 = init_std^2 I


@dataclass(frozen=True)
class OutputSpec:
    csv: Optional[str] = None
    gain: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    schema_version: int = SCHEMA_VERSION
    name: str = "scenario"
    seed: int = 0
    steps: int = 4000
    trials: int = 20
    meas_noise_std: float = 0.2  # R_r
    init_speed: float = 1.0  # initial velocity components uniform in [-v, v]
    model: ModelSpec = field(default_factory=ModelSpec)
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    graph: GraphSpec = field(default_factory=GraphSpec)
    weights_seed: int = 0
    delays: DelaySpec = field(default_factory=DelaySpec)
    gain: GainSpec = field(default_factory=GainSpec)
    faults: list = field(default_factory=list)  # list[FaultEntry]
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    kf: KfSpec = field(default_factory=KfSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.steps < 1 or self.trials < 1:
            raise ConfigError("steps and trials must be >= 1")
        if self.meas_noise_std < 0 or self.init_speed < 0:
            raise ConfigError("noise and speed settings must be >= 0")
        if self.delays.kind not in ("none", "fixed", "random"):
            raise ConfigError(f"unknown delay kind {self.delays.kind!r}")
        if self.detector.dof not in ("effective", "nominal"):
            raise ConfigError(f"unknown detector dof {self.detector.dof!r}")

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {"faults": FaultEntry}


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'scenario'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'scenario'}: unknown field(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        elif key in _NESTED and cls is Scenario:
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            kwargs[key] = [_build(_NESTED[key], v, f"{where}[{k}]") for k, v in enumerate(value)]
        else:
            kwargs[key] = _coerce(hint, value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'scenario'}: {exc}") from exc


def _coerce(hint, value, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return value
    return value


def scenario_from_dict(d: dict) -> Scenario:
    if "schema_version" not in d:
        raise ConfigError("scenario is missing schema_version")
    return _build(Scenario, d, "")


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario {path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(d)
