"""Experiment configuration: a versioned JSON document mapped onto nested dataclasses.

Unknown keys are rejected and every numeric field is range-checked when the
file is parsed, so a bad config fails before any output is written.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
EXPERIMENTS = ("circles2d", "mueller_brown")


class ConfigError(ValueError):
    pass


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


@dataclass
class CirclesConfig:
    n_samples: int = 10_000
    r_inner: float = 0.5
    r_outer: float = 1.0
    noise: float = 0.05

    def validate(self):
        _require(self.n_samples >= 2, "circles.n_samples must be >= 2")
        _require(0 < self.r_inner < self.r_outer, "circles needs 0 < r_inner < r_outer")
        _require(self.noise >= 0, "circles.noise must be >= 0")


@dataclass
class PotentialConfig:
    kind: str = "mueller_brown"
    stiffness: float = 1.0

    def validate(self):
        _require(self.kind in ("mueller_brown", "isotropic_quadratic"), f"unknown potential {self.kind!r}")
        _require(self.stiffness > 0, "potential.stiffness must be > 0")


@dataclass
class CvConfig:
    kind: str = "radial"
    encoder_hidden: list = field(default_factory=lambda: [32, 32, 32])
    decoder_hidden: list = field(default_factory=lambda: [32])
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 128
    calibrate_range: list | None = None
    checkpoint: str | None = None

    def validate(self):
        _require(self.kind in ("radial", "encoder"), f"unknown cv kind {self.kind!r}")
        _require(all(int(h) >= 1 for h in self.encoder_hidden + self.decoder_hidden), "hidden widths must be >= 1")
        _require(self.epochs >= 0 and self.batch_size >= 1 and self.lr > 0, "invalid cv training settings")
        if self.calibrate_range is not None:
            _require(len(self.calibrate_range) == 2 and self.calibrate_range[0] < self.calibrate_range[1],
                     "cv.calibrate_range must be [lo, hi] with lo < hi")
        if self.checkpoint is not None:
            _require(Path(self.checkpoint).is_file(), f"cv.checkpoint {self.checkpoint!r} does not exist")


@dataclass
class LangevinSection:
    step_size: float = 2e-4
    beta: float = 0.1
    n_steps: int = 3_000_000
    record_every: int = 100
    initial_point: list = field(default_factory=lambda: [-0.6, 1.2])

    def validate(self):
        _require(self.step_size > 0 and self.beta > 0, "langevin step_size and beta must be > 0")
        _require(self.n_steps >= 1 and self.record_every >= 1, "langevin n_steps/record_every must be >= 1")
        _require(self.n_steps >= self.record_every, "langevin records nothing (n_steps < record_every)")


@dataclass
class AbfSection:
    n_steps: int = 150_000
    equilibration_steps: int = 50_000
    record_every: int = 10
    grid_lo: float = -2.6
    grid_hi: float = 3.5
    grid_spacing: float = 0.1
    activation_threshold: int = 100

    def validate(self):
        _require(self.n_steps >= 1 and self.record_every >= 1, "abf n_steps/record_every must be >= 1")
        _require(0 <= self.equilibration_steps < self.n_steps, "abf equilibration must be < n_steps")
        _require(self.grid_lo < self.grid_hi and self.grid_spacing > 0, "invalid abf grid")
        _require(self.activation_threshold >= 1, "abf activation_threshold must be >= 1")


@dataclass
class FlowSection:
    hidden: list = field(default_factory=lambda: [128, 128])
    epochs: int = 1000
    batch_size: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    patience: int | None = 200
    standardize: bool = True

    def validate(self):
        _require(all(int(h) >= 1 for h in self.hidden), "flow.hidden widths must be >= 1")
        _require(self.epochs >= 0 and self.batch_size >= 1, "flow epochs >= 0 and batch_size >= 1 required")
        _require(self.lr > 0 and self.weight_decay >= 0, "flow lr > 0 and weight_decay >= 0 required")
        _require(self.patience is None or self.patience >= 1, "flow.patience must be >= 1 or null")


@dataclass
class GenerationSection:
    n_samples: int = 1000
    n_time_steps: int = 1000
    z_values: list = field(default_factory=lambda: [0.6])
    snapshot_times: list = field(default_factory=list)
    snapshot_samples: int = 2000

    def validate(self):
        _require(self.n_samples >= 1 and self.n_time_steps >= 0, "generation n_samples >= 1, n_time_steps >= 0")
        _require(all(0.0 <= t <= 1.0 for t in self.snapshot_times), "snapshot times must lie in [0, 1]")


@dataclass
class ProjectionSection:
    step_size: float = 0.01
    max_steps: int = 7000
    tolerance: float = 1e-3

    def validate(self):
        _require(self.step_size > 0 and self.max_steps >= 1 and self.tolerance > 0, "invalid projection settings")


@dataclass
class ReferenceSection:
    """Constrained-sampler reference ensemble on one level-set."""

    z: float = -2.0
    n_steps: int = 5000
    step_size: float = 2e-4
    record_every: int = 10
    n_chains: int = 100
    burn_in: int = 1000
    tolerance: float = 1e-5
    # inner projection: large Euler steps for the tight 1e-5 tolerance, with each
    # step's displacement capped so points follow the flow on their own branch
    projection_step: float = 0.5
    projection_max_displacement: float = 0.01

    def validate(self):
        _require(self.n_steps >= self.record_every >= 1, "reference n_steps >= record_every >= 1 required")
        _require(self.step_size > 0 and self.tolerance > 0 and self.projection_step > 0
                 and self.projection_max_displacement > 0,
                 "reference step_size/tolerance/projection_step/projection_max_displacement must be > 0")
        _require(self.n_chains >= 1 and self.burn_in >= 0, "reference n_chains >= 1, burn_in >= 0 required")


@dataclass
class EvaluationSection:
    n_z: int = 20
    z_range: list | None = None
    margin: float = 0.05
    n_samples: int = 1000
    n_time_steps: int = 1000
    n_bins: int = 64
    with_projection: bool = False
    density_z_values: list = field(default_factory=list)
    reference: ReferenceSection | None = None

    def validate(self):
        _require(self.n_z >= 1 and self.n_samples >= 1 and self.n_bins >= 1, "evaluation counts must be >= 1")
        _require(self.margin >= 0 and self.n_time_steps >= 0, "evaluation margin/n_time_steps must be >= 0")
        if self.z_range is not None:
            _require(len(self.z_range) == 2 and self.z_range[0] <= self.z_range[1], "evaluation.z_range must be [lo, hi]")
        if self.reference is not None:
            self.reference.validate()


@dataclass
class ExperimentConfig:
    experiment: str = "circles2d"
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs/circles2d"
    circles: CirclesConfig | None = None
    potential: PotentialConfig | None = None
    cv: CvConfig = field(default_factory=CvConfig)
    langevin: LangevinSection | None = None
    abf: AbfSection | None = None
    flow: FlowSection = field(default_factory=FlowSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> "ExperimentConfig":
        _require(self.schema_version == SCHEMA_VERSION, f"unsupported schema_version {self.schema_version}")
        _require(self.experiment in EXPERIMENTS, f"unknown experiment {self.experiment!r}")
        if self.experiment == "circles2d":
            _require(self.circles is not None, "circles2d needs a 'circles' section")
            _require(self.cv.kind == "radial", "circles2d uses the radial CV")
        else:
            _require(self.potential is not None and self.langevin is not None and self.abf is not None,
                     "mueller_brown needs 'potential', 'langevin' and 'abf' sections")
            _require(self.cv.kind == "encoder", "mueller_brown uses an encoder CV")
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                sub.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{where}: expected an integer")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return list(value)
    return value


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def default_config(experiment: str) -> ExperimentConfig:
    """Settings of the two reference experiments."""
    if experiment == "circles2d":
        cfg = ExperimentConfig(
            experiment="circles2d",
            output_dir="runs/circles2d",
            circles=CirclesConfig(),
            cv=CvConfig(kind="radial"),
            flow=FlowSection(hidden=[128, 128], epochs=1000, batch_size=1000, lr=1e-3,
                             weight_decay=1e-4, patience=200),
            generation=GenerationSection(n_samples=1000, n_time_steps=1000, z_values=[0.6],
                                         snapshot_times=[0.0, 0.25, 0.5, 0.75, 1.0]),
            evaluation=EvaluationSection(n_z=20, margin=0.05, n_samples=1000, n_time_steps=1000),
        )
    elif experiment == "mueller_brown":
        cfg = ExperimentConfig(
            experiment="mueller_brown",
            output_dir="runs/mueller_brown",
            potential=PotentialConfig(kind="mueller_brown"),
            cv=CvConfig(kind="encoder", calibrate_range=[-2.6, 3.5]),
            langevin=LangevinSection(),
            abf=AbfSection(),
            flow=FlowSection(hidden=[128, 128, 128], epochs=3000, batch_size=512, lr=1e-3,
                             weight_decay=0.0, patience=None),
            generation=GenerationSection(n_samples=1000, n_time_steps=100, z_values=[-2.0, 0.0, 2.0],
                                         snapshot_times=[0.0, 0.5, 0.9, 0.95, 1.0], snapshot_samples=1000),
            projection=ProjectionSection(step_size=0.01, max_steps=7000, tolerance=1e-3),
            evaluation=EvaluationSection(n_z=30, z_range=[-2.9, 3.6], n_samples=1000, n_time_steps=100,
                                         density_z_values=[-2.0, 0.0, 2.0], reference=ReferenceSection()),
        )
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    return cfg.validate()
