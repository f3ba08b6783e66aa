"""Layered run configuration: dataclass defaults < YAML file < command-line flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from fbgforce.bench import SweepGrid
from fbgforce.core import ConfigError, FbgPhysics
from fbgforce.estimators import ModelKind, ModelSpec
from fbgforce.peakdetect import KdeParams
from fbgforce.simulate import SimConfig, SpectrumConfig
from fbgforce.training import TrainConfig

__all__ = ["Config", "ConfigError", "SECTIONS", "load_config_file"]


def _default_model() -> ModelSpec:
    return ModelSpec(kind=ModelKind.FCN)


SECTIONS: dict[str, type] = {
    "simulate": SimConfig,
    "physics": FbgPhysics,
    "spectrum": SpectrumConfig,
    "kde": KdeParams,
    "model": ModelSpec,
    "train": TrainConfig,
    "bench": SweepGrid,
}


def load_config_file(path: Path | str) -> dict[str, dict]:
    """Read a YAML config and check every section and key against SECTIONS."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    for section, values in data.items():
        _check_section(section, values, str(path))
    return data


def _check_section(section: str, values, origin: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section '{section}' (expected one of {', '.join(SECTIONS)})")
    if not isinstance(values, dict):
        raise ConfigError(f"{origin}: section '{section}' must be a mapping")
    known = {f.name for f in fields(SECTIONS[section])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{origin}: unknown key(s) in '{section}': {', '.join(unknown)}")


def _build(section: str, values: dict):
    try:
        return SECTIONS[section](**values)
    except TypeError as e:
        raise ConfigError(f"section '{section}': {e}") from None


@dataclass(frozen=True)
class Config:
    simulate: SimConfig = field(default_factory=SimConfig)
    physics: FbgPhysics = field(default_factory=FbgPhysics)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    kde: KdeParams = field(default_factory=KdeParams)
    model: ModelSpec = field(default_factory=_default_model)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: SweepGrid = field(default_factory=SweepGrid)

    @classmethod
    def load(
        cls,
        path: Path | str | None = None,
        overrides: dict[str, dict] | None = None,
    ) -> Config:
        """Defaults, then the file at path, then overrides; None overrides are ignored."""
        layers = [load_config_file(path)] if path is not None else []
        if overrides:
            cleaned = {s: {k: v for k, v in vals.items() if v is not None} for s, vals in overrides.items()}
            for section, values in cleaned.items():
                _check_section(section, values, "overrides")
            layers.append(cleaned)

        base = cls()
        built = {}
        for section in SECTIONS:
            merged = asdict(getattr(base, section))
            for layer in layers:
                merged.update(layer.get(section) or {})
            built[section] = _build(section, merged)
        return cls(**built)

    def as_dict(self) -> dict:
        return {section: asdict(getattr(self, section)) for section in SECTIONS}
