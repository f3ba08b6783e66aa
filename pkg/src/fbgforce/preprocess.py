"""Resampling, wavelength-shift computation, alignment and windowing.

The interrogator stream is resampled to 1000 Hz and the scale stream is read
off its spline at the end of every 100-row window, so window t pairs shift rows
[100t, 100t+100) with the force at (100t + 99) / 1000 s.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BarycentricInterpolator, CubicSpline

from fbgforce.core import (
    INTERROGATOR_HZ,
    N_SENSORS,
    WINDOW_ROWS,
    Episode,
    FbgForceError,
    TimeSeries,
    WindowedExample,
)

logger = logging.getLogger(__name__)

REFERENCE_LEAD = 0.5  # seconds of 0 g lead-in used to estimate the reference
_GRID_TOL = 1e-9


class TooFewSamples(FbgForceError, ValueError):
    pass


class NonMonotonic(FbgForceError, ValueError):
    pass


class ChannelMismatch(FbgForceError, ValueError):
    pass


class NoOverlap(FbgForceError, ValueError):
    pass


def _check_resamplable(series: TimeSeries) -> None:
    if len(series) < 4:
        raise TooFewSamples(f"cubic resampling needs >= 4 samples, got {len(series)}")
    bad = np.flatnonzero(np.diff(series.timestamps) <= 0)
    if bad.size:
        raise NonMonotonic(f"timestamps not strictly increasing at index {bad[0] + 1}")


def _spline(series: TimeSeries) -> CubicSpline:
    _check_resamplable(series)
    return CubicSpline(series.timestamps, series.values, axis=0, bc_type="not-a-knot", extrapolate=False)


def grid_times(t_first: float, t_last: float, hz: float, origin: float = 0.0) -> np.ndarray:
    """origin + k/hz for every integer k that lands inside [t_first, t_last]."""
    k0 = math.ceil((t_first - origin) * hz - _GRID_TOL)
    k1 = math.floor((t_last - origin) * hz + _GRID_TOL)
    if k1 < k0:
        return np.empty(0)
    t = origin + np.arange(k0, k1 + 1) / hz
    return np.clip(t, t_first, t_last)


def resample_cubic(series: TimeSeries, target_hz: float, origin: float = 0.0) -> TimeSeries:
    """Not-a-knot cubic spline per channel evaluated on a constant-rate grid.

    The grid is anchored at origin and never extends past the first or last
    input sample.
    """
    if target_hz <= 0:
        raise ValueError(f"target_hz must be > 0, got {target_hz}")
    spline = _spline(series)
    t = grid_times(series.start, series.end, target_hz, origin)
    return TimeSeries(t, spline(t).reshape(len(t), series.channels))


def compute_shift(series: TimeSeries, reference) -> TimeSeries:
    ref = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    if ref.shape != (series.channels,):
        raise ChannelMismatch(f"reference has {ref.size} channels, series has {series.channels}")
    return TimeSeries(series.timestamps, series.values - ref[None, :])


def estimate_reference(series: TimeSeries, lead: float = REFERENCE_LEAD) -> np.ndarray:
    """Per-channel median over the first `lead` seconds (at least one row)."""
    if len(series) == 0:
        raise TooFewSamples("cannot estimate a reference from an empty series")
    mask = series.timestamps <= series.start + lead
    mask[0] = True
    return np.median(series.values[mask], axis=0)


@dataclass(frozen=True, eq=False)
class AlignedPair:
    shifts: TimeSeries
    forces: TimeSeries
    reference: np.ndarray

    def __post_init__(self):
        if len(self.shifts) != WINDOW_ROWS * len(self.forces):
            raise ValueError(
                f"shifts ({len(self.shifts)} rows) must be {WINDOW_ROWS} x forces ({len(self.forces)})"
            )


def label_times(n_windows: int) -> np.ndarray:
    """Time of the last shift row of each window, seconds from the common origin."""
    return (WINDOW_ROWS * np.arange(n_windows) + WINDOW_ROWS - 1) / INTERROGATOR_HZ


def align(interrogator: TimeSeries, scale: TimeSeries, reference=None) -> AlignedPair:
    """Resample both streams onto the overlap of their spans, origin at overlap start.

    reference defaults to estimate_reference(interrogator). Forces are clamped
    at 0 g since the spline can undershoot around contact onsets.
    """
    t0 = max(interrogator.start, scale.start)
    t1 = min(interrogator.end, scale.end)
    if t1 <= t0:
        raise NoOverlap(
            f"interrogator [{interrogator.start}, {interrogator.end}] and scale "
            f"[{scale.start}, {scale.end}] do not overlap"
        )
    if reference is None:
        reference = estimate_reference(interrogator)

    resampled = resample_cubic(interrogator, INTERROGATOR_HZ, origin=t0)
    inside = resampled.between(t0, t1)
    n_windows = len(inside) // WINDOW_ROWS
    rows = n_windows * WINDOW_ROWS
    shifts = compute_shift(
        TimeSeries(np.arange(rows) / INTERROGATOR_HZ, inside.values[:rows]),
        reference,
    )

    t_label = label_times(n_windows)
    at = np.clip(t0 + t_label, scale.start, scale.end)
    force = _spline(scale)(at)[:, 0]
    forces = TimeSeries(t_label, np.maximum(force, 0.0))
    logger.debug("aligned %.3f s overlap into %d windows", t1 - t0, n_windows)
    return AlignedPair(shifts=shifts, forces=forces, reference=np.asarray(reference, dtype=np.float64))


def window(pair: AlignedPair) -> list[WindowedExample]:
    x = pair.shifts.values.reshape(len(pair.forces), WINDOW_ROWS, pair.shifts.channels)
    return [WindowedExample(x=x[t], y=float(pair.forces.values[t, 0]), t=t) for t in range(len(pair.forces))]


@dataclass(frozen=True, eq=False)
class EpisodeWindows:
    """All windows of one episode as stacked arrays."""

    x: np.ndarray  # (T, 100, 3) nm
    y: np.ndarray  # (T,) grams
    times: np.ndarray  # (T,) label times, seconds
    index: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1, WINDOW_ROWS, N_SENSORS)
        y = np.asarray(self.y, dtype=np.float64).ravel()
        times = np.asarray(self.times, dtype=np.float64).ravel()
        if not len(x) == len(y) == len(times):
            raise ValueError(f"windows {len(x)}, labels {len(y)} and times {len(times)} differ")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.y)

    def examples(self) -> list[WindowedExample]:
        return [WindowedExample(x=self.x[t], y=float(self.y[t]), t=t) for t in range(len(self))]

    @classmethod
    def from_pair(cls, pair: AlignedPair, index: int = 0) -> EpisodeWindows:
        n = len(pair.forces)
        return cls(
            x=pair.shifts.values.reshape(n, WINDOW_ROWS, pair.shifts.channels),
            y=pair.forces.values[:, 0],
            times=pair.forces.timestamps,
            index=index,
        )


def prepare_episode(ep: Episode, reference=None) -> EpisodeWindows:
    return EpisodeWindows.from_pair(align(ep.interrogator, ep.scale, reference), index=ep.index)


def prepare_dataset(episodes: list[Episode], workers: int = 1) -> list[EpisodeWindows]:
    if workers > 1 and len(episodes) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            prepared = list(pool.map(prepare_episode, episodes))
    else:
        prepared = [prepare_episode(ep) for ep in episodes]
    logger.info("prepared %d episodes, %d windows", len(prepared), sum(len(p) for p in prepared))
    return prepared


class StreamWindower:
    """Incremental resampler and windower for live interrogator samples.

    Each grid point between the two middle samples of the latest four raw
    samples is filled by the cubic through those four, so output lags input by
    one raw sample. The reference is the median of raw samples in the first
    REFERENCE_LEAD seconds; windows are released once it is known.
    """

    def __init__(self, hz: float = INTERROGATOR_HZ, lead: float = REFERENCE_LEAD, reference=None):
        self._hz = hz
        self._lead = lead
        self._raw_t: list[float] = []
        self._raw_v: list[np.ndarray] = []
        self._lead_rows: list[np.ndarray] = []
        self._origin: float | None = None
        self._next_k = 0
        self._pending: list[np.ndarray] = []
        self._emitted = 0
        self.reference = None if reference is None else np.asarray(reference, dtype=np.float64)

    @property
    def windows_emitted(self) -> int:
        return self._emitted

    def push(self, t: float, values) -> list[tuple[float, np.ndarray]]:
        """Add one raw sample; return (label time, 100x3 shift window) pairs now complete."""
        v = np.asarray(values, dtype=np.float64).ravel()
        if self._raw_t and t <= self._raw_t[-1]:
            raise NonMonotonic(f"timestamp {t} does not follow {self._raw_t[-1]}")
        if self._origin is None:
            self._origin = t
        if self.reference is None:
            if t - self._origin <= self._lead:
                self._lead_rows.append(v)
            else:
                self.reference = np.median(np.array(self._lead_rows), axis=0)

        self._raw_t.append(t)
        self._raw_v.append(v)
        if len(self._raw_t) > 4:
            del self._raw_t[0], self._raw_v[0]
        if len(self._raw_t) == 4:
            self._fill(upto=self._raw_t[2], inclusive=False)
        return self._release()

    def flush(self) -> list[tuple[float, np.ndarray]]:
        """Fill the tail of the stream and release any remaining full windows."""
        if len(self._raw_t) == 4:
            self._fill(upto=self._raw_t[3], inclusive=True)
        if self.reference is None and self._lead_rows:
            self.reference = np.median(np.array(self._lead_rows), axis=0)
        return self._release()

    def _fill(self, upto: float, inclusive: bool) -> None:
        interp = BarycentricInterpolator(np.array(self._raw_t), np.array(self._raw_v), axis=0)
        while True:
            g = self._origin + self._next_k / self._hz
            if g > upto + _GRID_TOL or (not inclusive and g >= upto - _GRID_TOL):
                break
            self._pending.append(np.asarray(interp(g), dtype=np.float64).ravel())
            self._next_k += 1

    def _release(self) -> list[tuple[float, np.ndarray]]:
        out: list[tuple[float, np.ndarray]] = []
        if self.reference is None:
            return out
        while len(self._pending) >= WINDOW_ROWS:
            rows = np.array(self._pending[:WINDOW_ROWS])
            del self._pending[:WINDOW_ROWS]
            time = float(label_times(self._emitted + 1)[-1])
            out.append((time, rows - self.reference[None, :]))
            self._emitted += 1
        return out
