from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_SENSORS = 3
WINDOW_ROWS = 100
INTERROGATOR_HZ = 1000.0
SCALE_HZ = 10.0
# Seconds an episode stream may miss its [0, duration] span by.
SPAN_TOLERANCE = 1e-6


class FbgForceError(Exception):
    """Base class for every error raised by fbgforce."""


class ConfigError(FbgForceError, ValueError):
    """Invalid configuration section, key or value."""


class InvalidSeries(FbgForceError, ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Timestamped channel readings. Timestamps are seconds from episode start."""

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def checked(cls, timestamps, values) -> TimeSeries:
        series = cls(timestamps, values)
        violations = validate_series(series)
        if violations:
            raise InvalidSeries(violations)
        return series

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def channels(self) -> int:
        return self.values.shape[1] if self.values.ndim == 2 else 0

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    def between(self, t0: float, t1: float) -> TimeSeries:
        mask = (self.timestamps >= t0) & (self.timestamps <= t1)
        return TimeSeries(self.timestamps[mask], self.values[mask])


def validate_series(series: TimeSeries) -> list[str]:
    """Check TimeSeries invariants. Returns list of violations (empty = valid)."""
    violations: list[str] = []
    t = np.asarray(series.timestamps)
    v = np.asarray(series.values)

    if t.ndim != 1:
        violations.append(f"timestamps must be 1-D, got shape {t.shape}")
        return violations
    if v.ndim != 2:
        violations.append(f"values must be 2-D, got shape {v.shape}")
        return violations
    if v.shape[0] != t.shape[0]:
        violations.append(
            f"row count mismatch: {t.shape[0]} timestamps, {v.shape[0]} value rows"
        )
        return violations

    bad_t = np.flatnonzero(~np.isfinite(t))
    if bad_t.size:
        violations.append(f"non-finite timestamp @{bad_t[0]}")
    else:
        steps = np.flatnonzero(np.diff(t) <= 0)
        if steps.size:
            violations.append(f"non-increasing timestamp @{steps[0] + 1}")

    bad_rows = np.flatnonzero(~np.isfinite(v).all(axis=1))
    if bad_rows.size:
        violations.append(f"non-finite value @{bad_rows[0]}")
    return violations


@dataclass(frozen=True)
class FbgPhysics:
    """Forward constants of the reduced strain model.

    sensitivity is grams per unit axial strain; it replaces the stress and
    Young's-modulus chain with a single calibration scalar.
    """

    lambda_b: tuple[float, ...] = (1539.7, 1539.7, 1539.5)
    p_e: float = 0.22
    sensitivity: float = 1.8e7

    def __post_init__(self):
        object.__setattr__(self, "lambda_b", tuple(float(x) for x in self.lambda_b))
        if len(self.lambda_b) != N_SENSORS:
            raise ConfigError(f"lambda_b needs {N_SENSORS} entries, got {len(self.lambda_b)}")
        if any(lb <= 0 for lb in self.lambda_b):
            raise ConfigError("lambda_b must be positive")
        if not 0 < self.p_e < 1:
            raise ConfigError(f"p_e must be in (0, 1), got {self.p_e}")
        if self.sensitivity <= 0:
            raise ConfigError(f"sensitivity must be positive, got {self.sensitivity}")

    def nm_per_strain(self, sensor: int) -> float:
        return self.lambda_b[sensor] * (1.0 - self.p_e)


@dataclass(frozen=True, eq=False)
class SpectrumFrame:
    """Reflected intensity against wavelength for one sensor at one instant."""

    grid: np.ndarray
    intensity: np.ndarray
    sensor: int = 0
    time: float = 0.0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        i = np.asarray(self.intensity, dtype=np.float64)
        if g.shape != i.shape or g.ndim != 1:
            raise ValueError(f"grid {g.shape} and intensity {i.shape} must be equal 1-D shapes")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "intensity", i)


@dataclass(frozen=True)
class SorEvent:
    time: float
    sensor: int
    offset: float


@dataclass(frozen=True, eq=False)
class Episode:
    interrogator: TimeSeries
    scale: TimeSeries
    sor_events: list[SorEvent] = field(default_factory=list)
    seed: int = 0
    duration: float = 60.0
    index: int = 0

    def violations(self) -> list[str]:
        problems = [f"interrogator: {v}" for v in validate_series(self.interrogator)]
        problems += [f"scale: {v}" for v in validate_series(self.scale)]
        if self.interrogator.channels != N_SENSORS:
            problems.append(
                f"interrogator has {self.interrogator.channels} channels, expected {N_SENSORS}"
            )
        if self.scale.channels != 1:
            problems.append(f"scale has {self.scale.channels} channels, expected 1")
        for name, series in (("interrogator", self.interrogator), ("scale", self.scale)):
            if len(series) and (
                abs(series.start) > SPAN_TOLERANCE or abs(series.end - self.duration) > SPAN_TOLERANCE
            ):
                problems.append(
                    f"{name} spans [{series.start}, {series.end}] s, expected [0, {self.duration}]"
                )
        return problems


@dataclass(frozen=True, eq=False)
class WindowedExample:
    x: np.ndarray
    y: float
    t: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.shape != (WINDOW_ROWS, N_SENSORS):
            raise ValueError(f"window must be {WINDOW_ROWS}x{N_SENSORS}, got {x.shape}")
        object.__setattr__(self, "x", x)
