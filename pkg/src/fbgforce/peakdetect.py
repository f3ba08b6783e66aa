"""Entropy-based (KDE) peak detection and a parabolic baseline picker.

Each sample is scored by how much including it changes the kernel-density
entropy of its local context. Samples whose score is above the mean by more
than h standard deviations are peaks; adjacent qualifying samples collapse to
the highest-scoring one.

On spectra the detector runs on the matched-filtered, half-max clipped
intensity and picks the reflection band; the wavelength is read at the band
apex.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from fbgforce.core import ConfigError, FbgForceError, SpectrumFrame

logger = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateBandwidth(UserWarning):
    """A context had two equal values, so a bandwidth fell back to DEGENERATE_EPS."""


class NoPeak(FbgForceError):
    pass


class FlatSpectrum(FbgForceError, ValueError):
    pass


class EmptyInput(FbgForceError, ValueError):
    pass


class SignalTooShort(FbgForceError, ValueError):
    pass


@dataclass(frozen=True)
class KdeParams:
    k: int = 5  # half-width of the local context, samples
    w: int = 1  # spacing offset used for the per-point bandwidth
    h: float = 1.5  # Chebyshev multiplier on the score deviation

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.w < 1:
            raise ConfigError(f"w must be >= 1, got {self.w}")
        if self.h <= 0:
            raise ConfigError(f"h must be > 0, got {self.h}")


def _entropies(contexts: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise context_entropy over a (rows, m) array."""
    a = np.sort(contexts, axis=-1)
    m = a.shape[-1]
    idx = np.arange(m)
    partner = idx + w
    over = partner >= m
    partner[over] = idx[over] - w
    partner = np.clip(partner, 0, m - 1)

    bandwidth = np.abs(a - a[:, partner])
    degenerate = (bandwidth == 0).any(axis=-1)
    bandwidth = np.where(bandwidth == 0, DEGENERATE_EPS, bandwidth)

    u = (a[:, :, None] - a[:, None, :]) / bandwidth[:, :, None]
    density = np.exp(-0.5 * u * u).sum(axis=-1) * _INV_SQRT_2PI / (m * bandwidth)
    return -np.mean(np.log(density), axis=-1), degenerate


def context_entropy(values: np.ndarray, w: int) -> tuple[float, bool]:
    """Resubstitution entropy of a context under a Gaussian KDE.

    The bandwidth of the i-th smallest value is its distance to the (i+w)-th
    smallest, reflecting to the (i-w)-th past the top. Returns the entropy and
    whether any bandwidth was degenerate.
    """
    h, degenerate = _entropies(np.asarray(values, dtype=np.float64)[None, :], w)
    return float(h[0]), bool(degenerate[0])


def _as_signal(signal, params: KdeParams) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"signal must be 1-D, got shape {x.shape}")
    if x.size <= 2 * params.k + 1:
        raise SignalTooShort(f"signal length {x.size} must exceed 2k+1 = {2 * params.k + 1}")
    if not np.isfinite(x).all():
        raise ValueError("signal contains non-finite values")
    return x


def kde_score(signal, params: KdeParams | None = None) -> np.ndarray:
    """Entropy gained by adding each sample to its +-k neighbourhood.

    Contexts near the ends are truncated. Emits DegenerateBandwidth when any
    context needed the epsilon bandwidth.
    """
    params = params or KdeParams()
    x = _as_signal(signal, params)
    n, k = x.size, params.k
    scores = np.zeros(n)

    # Full contexts: row r is the neighbourhood of sample r + k.
    contexts = sliding_window_view(x, 2 * k + 1)
    live = np.flatnonzero(np.ptp(contexts, axis=1) > 0)
    degenerate = False
    if live.size:
        rows = contexts[live]
        h_with, deg_with = _entropies(rows, params.w)
        h_without, deg_without = _entropies(np.delete(rows, k, axis=1), params.w)
        scores[live + k] = h_with - h_without
        degenerate = bool(deg_with.any() or deg_without.any())

    for i in (*range(k), *range(n - k, n)):
        lo, hi = max(0, i - k), min(n, i + k + 1)
        with_i = x[lo:hi]
        if np.ptp(with_i) == 0:
            continue
        without_i = np.delete(with_i, i - lo)
        h_with, deg_with = context_entropy(with_i, params.w)
        h_without, deg_without = context_entropy(without_i, params.w)
        scores[i] = h_with - h_without
        degenerate = degenerate or deg_with or deg_without
    if degenerate:
        warnings.warn(
            DegenerateBandwidth(f"zero bandwidth replaced by {DEGENERATE_EPS}"),
            stacklevel=2,
        )
    return scores


def chebyshev_peaks(scores: np.ndarray, h: float) -> list[int]:
    """Indices with score above the mean by more than h std, one per run."""
    s = np.asarray(scores, dtype=np.float64)
    mean, std = s.mean(), s.std()
    if std == 0:
        return []
    qualifying = (s > mean) & (np.abs(s - mean) > h * std)
    peaks: list[int] = []
    run_best: int | None = None
    for i in range(s.size):
        if qualifying[i]:
            if run_best is None or s[i] > s[run_best]:
                run_best = i
        elif run_best is not None:
            peaks.append(run_best)
            run_best = None
    if run_best is not None:
        peaks.append(run_best)
    return peaks


def detect_peaks(signal, params: KdeParams | None = None) -> list[int]:
    params = params or KdeParams()
    return chebyshev_peaks(kde_score(signal, params), params.h)


def _refined(grid: np.ndarray, y: np.ndarray, j: int) -> float:
    """grid[j] moved to the vertex of the parabola through bins j-1..j+1, at most half a bin."""
    if j == 0 or j == y.size - 1:
        return float(grid[j])
    y0, y1, y2 = y[j - 1], y[j], y[j + 1]
    denom = y0 - 2.0 * y1 + y2
    offset = 0.0 if denom >= 0 else 0.5 * (y0 - y2) / denom
    offset = min(0.5, max(-0.5, offset))
    return float(grid[j] + offset * (grid[j + 1] - grid[j]))


def matched_filter(frame: SpectrumFrame, fwhm: float) -> np.ndarray:
    """Intensity correlated with a unit-area Gaussian of the given FWHM (nm).

    Assumes a uniform grid. Samples beyond the grid count as zero intensity.
    """
    if fwhm <= 0:
        raise ConfigError(f"fwhm must be > 0, got {fwhm}")
    step = float(np.mean(np.diff(frame.grid)))
    return ndimage.gaussian_filter1d(frame.intensity, fwhm / FWHM_PER_SIGMA / step, mode="constant")


def peak_wavelength(frame: SpectrumFrame, params: KdeParams | None = None, fwhm: float | None = None) -> float:
    """Wavelength of the reflection band picked by the KDE detector.

    With fwhm the spectrum first goes through matched_filter. The result is
    clipped at half its height above the median floor, so only the reflection
    band stays non-zero. The highest-scoring KDE detection names a band, and
    the band's apex, refined by a parabola, is returned.
    """
    params = params or KdeParams()
    y = frame.intensity if fwhm is None else matched_filter(frame, fwhm)
    floor, top = float(np.median(y)), float(np.max(y))
    if not top > floor:
        raise NoPeak(f"flat spectrum for sensor {frame.sensor} at t={frame.time}")
    clipped = np.maximum(y - (floor + 0.5 * (top - floor)), 0.0)

    # Band edges meet exact zeros, which always needs the epsilon bandwidth.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBandwidth)
        scores = kde_score(clipped, params)
    peaks = chebyshev_peaks(scores, params.h)
    if not peaks:
        raise NoPeak(f"no KDE peak in spectrum of sensor {frame.sensor} at t={frame.time}")
    best = max(peaks, key=lambda i: scores[i])

    bands, _ = ndimage.label(clipped > 0)
    if bands[best] == 0:
        inside = np.flatnonzero(bands)
        best = int(inside[np.argmin(np.abs(inside - best))])
    members = np.flatnonzero(bands == bands[best])
    apex = int(members[np.argmax(y[members])])
    return _refined(frame.grid, y, apex)


def baseline_peak(frame: SpectrumFrame) -> float:
    """Argmax bin refined by a 3-point parabola (offset clamped to half a bin)."""
    y = frame.intensity
    if y.size == 0 or np.ptp(y) == 0:
        raise FlatSpectrum("spectrum is constant")
    return _refined(frame.grid, y, int(np.argmax(y)))


@dataclass(frozen=True)
class PeakStats:
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("cannot summarise an empty peak vector")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def compare_stats(peaks_a, peaks_b) -> PeakStats:
    """Sample mean and (n-1) standard deviation of two peak vectors."""
    mean_a, std_a = _mean_std(peaks_a)
    mean_b, std_b = _mean_std(peaks_b)
    return PeakStats(mean_a=mean_a, std_a=std_a, mean_b=mean_b, std_b=std_b)
