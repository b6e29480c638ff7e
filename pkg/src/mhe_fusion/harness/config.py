"""Simulation and benchmark configuration.

Config files are TOML or JSON with the sections below; every key is
optional and falls back to the default shown.

```toml
scenario = "planar"          # "planar" (single body) or "arm" (base + end-effector)
seed = 0
outlier_fraction = 0.0       # share of camera measurements drawn with 100x noise
blackouts = [[15.0, 18.0], [40.0, 43.0]]   # primary camera silent on [start, end)

[trajectory]                 # p(t) = center + amplitude * sin(2 pi frequency t + phase)
duration = 60.0
amplitude = [5.0, 3.0]
frequency = [0.05, 0.1]
phase = [0.0, 0.0]
center = [0.0, 0.0]

[rates]                      # Hz; update rates must divide the process rate
process = 100.0
camera = 10.0
camera2 = 5.0
gps = 1.0

[noise]                      # standard deviations
camera_position = 0.05
camera_heading = 0.02
gyro = 0.02
accel = 0.2
gps = 0.1
wheel = 0.05
joint = 0.002
initial = 1.0                # scale on the initial-state perturbation (initial_sigma)

[sensors]
camera = true
camera2 = false              # second landmark camera, unaffected by blackouts
gps = false
wheels = false

[landmarks]
count = 24
margin = 3.0
range = 8.0
max_visible = 2
camera2_offset = [-0.3, 0.0] # body-frame mounting of the second camera

[arm]                        # "arm" scenario only
links = [1.0, 0.8]
joint_bias = 0.05
camera_offset = [0.1, 0.0]

[estimator]
batch_size = 5
threads = 1
huber = 0.0                  # Huber threshold in whitened units; 0 disables
max_iterations = 10
initial_sigma = [0.1, 0.05, 0.3]   # position, heading, velocity
```
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..problem import ConfigurationError

SCHEMA_VERSION = 1


@dataclass
class TrajectoryConfig:
    duration: float = 60.0
    amplitude: Tuple[float, float] = (5.0, 3.0)
    frequency: Tuple[float, float] = (0.05, 0.1)
    phase: Tuple[float, float] = (0.0, 0.0)
    center: Tuple[float, float] = (0.0, 0.0)


@dataclass
class RateConfig:
    process: float = 100.0
    camera: float = 10.0
    camera2: float = 5.0
    gps: float = 1.0


@dataclass
class NoiseConfig:
    camera_position: float = 0.05
    camera_heading: float = 0.02
    gyro: float = 0.02
    accel: float = 0.2
    gps: float = 0.1
    wheel: float = 0.05
    joint: float = 0.002
    initial: float = 1.0


@dataclass
class SensorConfig:
    camera: bool = True
    camera2: bool = False
    gps: bool = False
    wheels: bool = False

    NAMES = ("camera", "camera2", "gps", "wheels")

    def label(self) -> str:
        return "+".join(k for k in self.NAMES if getattr(self, k)) or "none"

    @classmethod
    def parse(cls, text: str) -> "SensorConfig":
        names = {t.strip() for t in text.split("+") if t.strip()}
        unknown = names - set(cls.NAMES)
        if unknown:
            raise ConfigurationError(f"unknown sensors {sorted(unknown)}")
        return cls(**{k: k in names for k in cls.NAMES})


@dataclass
class LandmarkConfig:
    count: int = 24
    margin: float = 3.0
    range: float = 8.0
    max_visible: int = 2
    camera2_offset: Tuple[float, float] = (-0.3, 0.0)


@dataclass
class ArmConfig:
    links: Tuple[float, float] = (1.0, 0.8)
    joint_bias: float = 0.05
    camera_offset: Tuple[float, float] = (0.1, 0.0)


@dataclass
class EstimatorConfig:
    batch_size: int = 5
    threads: int = 1
    huber: float = 0.0
    max_iterations: int = 10
    initial_sigma: Tuple[float, float, float] = (0.1, 0.05, 0.3)


@dataclass
class SimConfig:
    scenario: str = "planar"
    seed: int = 0
    outlier_fraction: float = 0.0
    blackouts: List[Tuple[float, float]] = field(default_factory=lambda: [(15.0, 18.0), (40.0, 43.0)])
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    rates: RateConfig = field(default_factory=RateConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sensors: SensorConfig = field(default_factory=SensorConfig)
    landmarks: LandmarkConfig = field(default_factory=LandmarkConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scenario not in ("planar", "arm"):
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        r = self.rates
        for name in ("process", "camera", "camera2", "gps"):
            if not getattr(r, name) > 0:
                raise ConfigurationError(f"rates.{name} must be positive")
        for name in ("camera", "camera2", "gps"):
            ratio = r.process / getattr(r, name)
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigurationError(f"rates.{name} must divide rates.process")
        if not self.trajectory.duration > 0:
            raise ConfigurationError("trajectory.duration must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigurationError("outlier_fraction must lie in [0, 1]")
        for name, v in asdict(self.noise).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"noise.{name} must be a finite non-negative number")
        for a, b in self.blackouts:
            if not b > a:
                raise ConfigurationError(f"blackout [{a}, {b}] is empty")
        e = self.estimator
        if e.batch_size < 2:
            raise ConfigurationError("estimator.batch_size must be >= 2")
        if e.threads < 1:
            raise ConfigurationError("estimator.threads must be >= 1")
        if e.huber < 0:
            raise ConfigurationError("estimator.huber must be >= 0")
        if len(e.initial_sigma) != 3 or min(e.initial_sigma) <= 0:
            raise ConfigurationError("estimator.initial_sigma needs three positive values")
        if self.landmarks.count < 1 or self.landmarks.max_visible < 1:
            raise ConfigurationError("landmarks.count and landmarks.max_visible must be >= 1")
        if not (self.sensors.camera or self.sensors.camera2 or self.sensors.gps):
            raise ConfigurationError("enable at least one update sensor (camera, camera2 or gps)")

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def replace(self, **changes) -> "SimConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"estimator.batch_size": 8})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *path, leaf = key.split(".")
            for p in path:
                node = node[p]
            if leaf not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[leaf] = copy.deepcopy(value)
        return SimConfig.from_dict(d)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        d = dict(d)
        sections = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            sub = _SECTION_TYPES.get(name)
            if sub is not None:
                kwargs[name] = _build_section(sub, name, value)
            elif name == "blackouts":
                kwargs[name] = [tuple(float(x) for x in w) for w in value]
            else:
                kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


_SECTION_TYPES = {
    "trajectory": TrajectoryConfig, "rates": RateConfig, "noise": NoiseConfig,
    "sensors": SensorConfig, "landmarks": LandmarkConfig, "arm": ArmConfig,
    "estimator": EstimatorConfig,
}


def _build_section(cls, name, value):
    if not isinstance(value, dict):
        raise ConfigurationError(f"section {name!r} must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})


def load_config(path) -> SimConfig:
    """Read a TOML (``.toml``) or JSON config file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".toml":
            d = tomllib.loads(raw.decode())
        else:
            d = json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    return SimConfig.from_dict(d)
