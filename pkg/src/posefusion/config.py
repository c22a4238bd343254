"""Experiment configuration: YAML loading with strict unknown-key rejection
(catching typos before long runs) and per-stage config resolution."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .apr import AprConfig
from .errors import ConfigError
from .pe import PeConfig
from .rpr import RprConfig
from .simulate import ScenarioSpec, SimCamera


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "simulate"  # seven-scenes | generic | simulate
    root: str | None = None
    scene: str | None = None  # seven-scenes only
    manifest: str = "manifest.yaml"  # generic: relative to root
    undersample_to_hz: float | None = None

    def validate(self) -> None:
        if self.source not in ("seven-scenes", "generic", "simulate"):
            raise ConfigError(f"dataset.source must be seven-scenes|generic|simulate, got {self.source!r}")
        if self.source == "seven-scenes" and (self.root is None or self.scene is None):
            raise ConfigError("dataset.source seven-scenes requires dataset.root and dataset.scene")
        if self.source == "generic" and self.root is None:
            raise ConfigError("dataset.source generic requires dataset.root")
        if self.undersample_to_hz is not None and self.undersample_to_hz <= 0:
            raise ConfigError("dataset.undersample_to_hz must be positive")


@dataclass(frozen=True)
class FlowConfig:
    provider: str = "synthetic"  # synthetic | flo-dir
    flo_dir: str | None = None
    zones_x: int = 16
    zones_y: int = 16

    def validate(self) -> None:
        if self.provider not in ("synthetic", "flo-dir"):
            raise ConfigError(f"flow.provider must be synthetic|flo-dir, got {self.provider!r}")
        if self.provider == "flo-dir" and not self.flo_dir:
            raise ConfigError("flow.provider flo-dir requires flow.flo_dir")
        if self.zones_x < 1 or self.zones_y < 1:
            raise ConfigError("zone counts must be positive")


@dataclass(frozen=True)
class SimulateSection:
    extent: tuple[float, float] = (6.5, 9.0)
    train_shape: str = "zigzag"
    test_shape: str = "diagonal"
    speed_mps: float = 0.3
    speed_variation: float = 0.0
    frame_rate_hz: float = 30.0
    zigzag_rows: int = 5
    plane_depth_m: float = 3.0
    max_roll_deg: float = 5.0
    roll_period_m: float = 7.3
    texture_seed: int = 0
    texture_components: int = 24
    image_width: int = 240
    image_height: int = 240
    fx: float = 230.0
    fy: float = 230.0

    def scenario(self) -> ScenarioSpec:
        camera = SimCamera(self.image_width, self.image_height, self.fx, self.fy)
        return ScenarioSpec(
            extent=tuple(self.extent),
            train_shape=self.train_shape,
            test_shape=self.test_shape,
            speed_mps=self.speed_mps,
            speed_variation=self.speed_variation,
            frame_rate_hz=self.frame_rate_hz,
            zigzag_rows=self.zigzag_rows,
            plane_depth_m=self.plane_depth_m,
            max_roll_deg=self.max_roll_deg,
            roll_period_m=self.roll_period_m,
            texture_seed=self.texture_seed,
            texture_components=self.texture_components,
            camera=camera,
        )


@dataclass(frozen=True)
class EvalSection:
    plot: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = False
    torch_threads: int | None = None
    out_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    flow: FlowConfig = field(default_factory=FlowConfig)
    apr: AprConfig = field(default_factory=AprConfig)
    rpr: RprConfig = field(default_factory=RprConfig)
    pe: PeConfig = field(default_factory=PeConfig)
    evaluation: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        self.dataset.validate()
        self.flow.validate()
        try:
            self.apr.validate()
            self.rpr.validate()
            self.pe.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_TUPLE_FIELDS = {"extent"}


def _build_section(cls, data: dict | None, section: str, defaults: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    merged = dict(defaults or {})
    merged.update(data)
    for key in list(merged):
        if key in _TUPLE_FIELDS and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from None


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Load and validate a YAML experiment config.

    Unknown keys anywhere are rejected. Stage seeds default to the global
    seed when a section does not set one explicitly; ``seed_override``
    (the --seed flag) replaces the global seed before that resolution.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return config_from_dict(data, seed_override=seed_override)


def config_from_dict(data: dict, seed_override: int | None = None) -> ExperimentConfig:
    known = {
        "seed",
        "deterministic",
        "torch_threads",
        "out_dir",
        "dataset",
        "simulate",
        "flow",
        "apr",
        "rpr",
        "pe",
        "evaluation",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    seed = int(data.get("seed", 0)) if seed_override is None else int(seed_override)
    stage_seed = {"seed": seed}
    cfg = ExperimentConfig(
        seed=seed,
        deterministic=bool(data.get("deterministic", False)),
        torch_threads=data.get("torch_threads"),
        out_dir=data.get("out_dir"),
        dataset=_build_section(DatasetConfig, data.get("dataset"), "dataset"),
        simulate=_build_section(SimulateSection, data.get("simulate"), "simulate"),
        flow=_build_section(FlowConfig, data.get("flow"), "flow"),
        apr=_build_section(AprConfig, data.get("apr"), "apr", defaults=stage_seed),
        rpr=_build_section(RprConfig, data.get("rpr"), "rpr", defaults=stage_seed),
        pe=_build_section(PeConfig, data.get("pe"), "pe", defaults=stage_seed),
        evaluation=_build_section(EvalSection, data.get("evaluation"), "evaluation"),
    )
    cfg.validate()
    return cfg
