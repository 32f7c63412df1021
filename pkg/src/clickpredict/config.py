"""Pipeline configuration: one YAML file, one section per module.

``load_config(path, overrides)`` starts from the defaults below, applies the
file, then ``section.key=value`` overrides (values parsed as YAML scalars).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable

import yaml

from .synth import SiteModel


class ConfigError(ValueError):
    pass


@dataclass
class SessionsSection:
    max_session_len: int = 1000


@dataclass
class ExamplesSection:
    generator: str = "first_positive"
    positive_event_type: str = "positive"
    filtered_event_types: list = field(default_factory=lambda: ["log", "positive", "prediction_point"])
    max_len: int = 40


@dataclass
class EncodingSection:
    hash_dim: int = 100
    salt: str = "some_fixed_string"
    dwell_linear_step: float = 5.0
    dwell_linear_cutoff: float = 60.0
    dwell_nonlinear_cutoff: float = 7200.0
    dwell_n_edges: int = 30


@dataclass
class ModelSection:
    gru_units: int = 32
    mlp_layer_sizes: list = field(default_factory=lambda: [16, 16])
    merge_units: int = 16
    dropout_rate: float = 0.0
    l2_lambda: float = 0.0
    pos_weight: float = 1.0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 8
    batch_size: int = 128
    seed: int = 0
    val_fraction: float = 0.2
    grid: dict = field(default_factory=lambda: {
        "l2_lambda": [0.0, 1e-4, 1e-3],
        "dropout_rate": [0.0, 0.2, 0.5],
        "gru_units": [16, 32, 64],
    })


@dataclass
class CalibrationSection:
    enabled: bool = True
    fit_fraction: float = 0.5
    lr: float = 0.1
    decay: float = 0.5
    decay_every: int = 200
    steps: int = 1000
    ece_bins: int = 10
    min_positives: int = 100


@dataclass
class EvaluationSection:
    test_fraction: float = 0.1
    n_segments: int = 5
    hist_bins: int = 20
    cohorts: dict = field(default_factory=lambda: {
        "engaged": "click_count > 10 AND time_on_site > 60",
    })


@dataclass
class ServingSection:
    host: str = "127.0.0.1"
    port: int = 8080
    ttl_seconds: float = 3 * 86_400
    max_events_per_user: int = 200
    prediction_log: str = "predictions.jsonl"
    log_max_bytes: int = 64 * 1024 * 1024


@dataclass
class LifecycleSection:
    family_id: str = "purchase"
    window_days: int = 30
    min_examples: int = 500
    auc_tolerance: float = 0.01
    verification_sample_size: int = 1000
    schedule_days: int = 7
    horizon_seconds: float = 3600.0


@dataclass
class PathsSection:
    archive: str = "events.jsonl"
    truth: str = "truth.tsv"
    models: str = "models"
    out: str = "out"


SECTIONS = {
    "sessions": SessionsSection,
    "examples": ExamplesSection,
    "encoding": EncodingSection,
    "model": ModelSection,
    "calibration": CalibrationSection,
    "evaluation": EvaluationSection,
    "serving": ServingSection,
    "lifecycle": LifecycleSection,
    "synth": SiteModel,
    "paths": PathsSection,
}


@dataclass
class Config:
    sessions: SessionsSection = field(default_factory=SessionsSection)
    examples: ExamplesSection = field(default_factory=ExamplesSection)
    encoding: EncodingSection = field(default_factory=EncodingSection)
    model: ModelSection = field(default_factory=ModelSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    serving: ServingSection = field(default_factory=ServingSection)
    lifecycle: LifecycleSection = field(default_factory=LifecycleSection)
    synth: SiteModel = field(default_factory=SiteModel)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _section(cls, values: dict, current=None):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    base = dataclasses.asdict(current) if current is not None else {}
    base.update(values)
    try:
        return cls(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(data: dict | None, base: Config | None = None) -> Config:
    cfg = base or Config()
    for name, values in (data or {}).items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        setattr(cfg, name, _section(SECTIONS[name], values, getattr(cfg, name)))
    return cfg


def apply_overrides(cfg: Config, overrides: Iterable[str]) -> Config:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        key, raw = item.split("=", 1)
        section, name = key.split(".", 1)
        cfg = from_dict({section: {name: yaml.safe_load(raw)}}, cfg)
    return cfg


def load_config(path=None, overrides: Iterable[str] = (), seed: int | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data: Any = yaml.safe_load(fh)
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must be a mapping of sections")
        cfg = from_dict(data, cfg)
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg = from_dict({"synth": {"seed": seed}, "model": {"seed": seed}}, cfg)
    return cfg


def default_config_text() -> str:
    return resources.files("clickpredict").joinpath("default_config.yaml").read_text(encoding="utf-8")
