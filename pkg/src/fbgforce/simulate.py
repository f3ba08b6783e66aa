from __future__ import annotations

import logging
import math
from collections.abc import Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from fbgforce.core import (
    N_SENSORS,
    ConfigError,
    Episode,
    FbgForceError,
    FbgPhysics,
    SorEvent,
    SpectrumFrame,
    TimeSeries,
)
from fbgforce.manifest import config_hash

logger = logging.getLogger(__name__)

# Sub-stream labels for the per-episode RNG.
_POKES, _SENSOR, _SCALE = 0, 1, 2


class EdgeError(FbgForceError, ValueError):
    """Bragg wavelength too close to the spectrum grid edge."""


def _check_range(name: str, rng: tuple[float, float], low: float = 0.0) -> None:
    if len(rng) != 2 or not rng[0] < rng[1]:
        raise ConfigError(f"{name} must be an increasing (low, high) pair, got {rng}")
    if rng[0] < low:
        raise ConfigError(f"{name} lower bound must be >= {low}, got {rng[0]}")


def _check_prob(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class SimConfig:
    episodes: int = 20
    duration: float = 60.0
    contact_rate: float = 20.0  # pokes per minute
    force_peak_range: tuple[float, float] = (5.0, 50.0)
    poke_width_range: tuple[float, float] = (0.5, 3.0)
    bend_prob: float = 0.8
    bend_ratio_range: tuple[float, float] = (60.0, 120.0)
    sor_prob: float = 0.2
    sor_offset_range: tuple[float, float] = (0.02, 0.10)
    noise_sigma: float = 8e-3
    interrogator_hz: float = 1000.0
    interrogator_jitter: float = 0.02
    scale_hz: float = 10.0
    scale_jitter: float = 0.05
    lead_in: float = 1.0  # 0 g at both ends of the episode, seconds
    dense_hz: float = 1000.0
    seed: int = 0
    antithetic: bool = True  # odd episodes mirror the non-axial shift of the one before

    def __post_init__(self):
        for name in ("force_peak_range", "poke_width_range", "bend_ratio_range", "sor_offset_range"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.episodes < 0:
            raise ConfigError(f"episodes must be >= 0, got {self.episodes}")
        if self.duration <= 2 * self.lead_in:
            raise ConfigError(f"duration {self.duration} leaves no room after lead-in {self.lead_in}")
        if self.contact_rate < 0:
            raise ConfigError(f"contact_rate must be >= 0, got {self.contact_rate}")
        _check_range("force_peak_range", self.force_peak_range)
        _check_range("poke_width_range", self.poke_width_range)
        _check_range("sor_offset_range", self.sor_offset_range)
        _check_range("bend_ratio_range", self.bend_ratio_range, low=2.0)
        _check_prob("bend_prob", self.bend_prob)
        _check_prob("sor_prob", self.sor_prob)
        _check_prob("interrogator_jitter", self.interrogator_jitter)
        _check_prob("scale_jitter", self.scale_jitter)
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        for name in ("interrogator_hz", "scale_hz", "dense_hz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")


@dataclass(frozen=True)
class SpectrumConfig:
    start: float = 1535.0
    stop: float = 1545.0
    step: float = 0.005
    fwhm: float = 0.5
    snr: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if not self.stop > self.start or self.step <= 0:
            raise ConfigError("spectrum grid must be strictly increasing")
        if self.fwhm <= 0:
            raise ConfigError(f"fwhm must be > 0, got {self.fwhm}")
        if self.snr <= 0:
            raise ConfigError(f"snr must be > 0, got {self.snr}")

    @property
    def grid(self) -> np.ndarray:
        n = int(round((self.stop - self.start) / self.step)) + 1
        return np.linspace(self.start, self.stop, n)


@dataclass(frozen=True)
class Poke:
    start: int  # dense-grid index where the bump leaves zero
    width: int  # even number of dense samples
    peak: float

    @property
    def end(self) -> int:
        return self.start + self.width


@dataclass(frozen=True)
class PokeGeometry:
    start: float
    end: float
    theta: float
    bent: bool
    bend_ratio: float
    sor: SorEvent | None = None

    def channel_gain(self, sensor: int) -> float:
        """Multiplier on the axial strain seen by one sensor."""
        if not self.bent:
            return 1.0
        return 1.0 + self.bend_ratio * math.cos(self.theta + 2.0 * math.pi * sensor / N_SENSORS)


def episode_seed(cfg: SimConfig, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])


def episode_rng(cfg: SimConfig, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index, stream])


def mirror_source(cfg: SimConfig, index: int) -> int | None:
    """Index of the episode that episode index mirrors, or None.

    A mirrored episode replays its source's pokes, timestamps and noise draws
    with the bending rotated by pi and SoR offsets and noise negated, so the
    pair's odd shift moments cancel except for the axial part.
    """
    if cfg.antithetic and index % 2 == 1:
        return index - 1
    return None


def _draw_index(cfg: SimConfig, index: int) -> int:
    source = mirror_source(cfg, index)
    return index if source is None else source


def dense_times(cfg: SimConfig) -> np.ndarray:
    n = int(round(cfg.duration * cfg.dense_hz)) + 1
    return np.arange(n) / cfg.dense_hz


def plan_pokes(cfg: SimConfig, episode_index: int) -> list[Poke]:
    """Place non-overlapping raised-cosine pokes on the dense grid."""
    if cfg.contact_rate == 0:
        return []
    rng = episode_rng(cfg, _draw_index(cfg, episode_index), _POKES)
    period = 60.0 / cfg.contact_rate
    mean_width = sum(cfg.poke_width_range) / 2
    gap_mean = max(period - mean_width, 0.2)
    last_index = int(round((cfg.duration - cfg.lead_in) * cfg.dense_hz))

    pokes: list[Poke] = []
    cursor = int(round(cfg.lead_in * cfg.dense_hz))
    while True:
        gap = rng.exponential(gap_mean)
        width_s = rng.uniform(*cfg.poke_width_range)
        peak = rng.uniform(*cfg.force_peak_range)
        start = cursor + 1 + int(round(gap * cfg.dense_hz))
        width = 2 * max(1, int(round(width_s * cfg.dense_hz / 2)))
        if start + width > last_index:
            break
        pokes.append(Poke(start=start, width=width, peak=float(peak)))
        cursor = start + width
    return pokes


def gen_force_profile(cfg: SimConfig, episode_index: int) -> TimeSeries:
    """Dense 1-channel force series in grams built from raised-cosine pokes."""
    t = dense_times(cfg)
    force = np.zeros_like(t)
    for poke in plan_pokes(cfg, episode_index):
        phase = np.arange(poke.width + 1) / poke.width
        force[poke.start : poke.end + 1] = poke.peak * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    return TimeSeries(t, force)


def poke_runs(force: TimeSeries) -> list[tuple[int, int]]:
    """Inclusive (first, last) index pairs of contiguous non-zero force."""
    active = force.values[:, 0] > 0
    if not active.any():
        return []
    edges = np.diff(active.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), stops.tolist()))


def draw_geometry(
    force: TimeSeries,
    cfg: SimConfig,
    rng: np.random.Generator,
    mirror: bool = False,
) -> list[PokeGeometry]:
    """Draw rotation, bend and SoR outcome for every poke in a force series.

    mirror rotates every poke by pi and flips every SoR sign.
    """
    t = force.timestamps
    geometry: list[PokeGeometry] = []
    for first, last in poke_runs(force):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        bent = bool(rng.random() < cfg.bend_prob)
        ratio = rng.uniform(*cfg.bend_ratio_range)
        has_sor = bool(rng.random() < cfg.sor_prob)
        sensor = int(rng.integers(N_SENSORS))
        magnitude = rng.uniform(*cfg.sor_offset_range)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if mirror:
            theta = (theta + math.pi) % (2.0 * math.pi)
            sign = -sign
        # Pokes occupy [first - 1, last + 1] including their zero endpoints.
        end_time = float(t[min(last + 1, len(t) - 1)])
        sor = SorEvent(time=end_time, sensor=sensor, offset=sign * magnitude) if has_sor else None
        geometry.append(
            PokeGeometry(
                start=float(t[max(first - 1, 0)]),
                end=end_time,
                theta=theta,
                bent=bent,
                bend_ratio=ratio if bent else 0.0,
                sor=sor,
            )
        )
    return geometry


def noiseless_shift(force: TimeSeries, phys: FbgPhysics, geometry: list[PokeGeometry]) -> np.ndarray:
    """Strain-induced wavelength shift (nm) per sensor on the force grid."""
    f = force.values[:, 0]
    axial = f / phys.sensitivity
    gains = np.ones((len(f), N_SENSORS))
    for poke, (first, last) in zip(geometry, poke_runs(force)):
        for sensor in range(N_SENSORS):
            gains[first : last + 1, sensor] = poke.channel_gain(sensor)
    scale = np.array([phys.nm_per_strain(s) for s in range(N_SENSORS)])
    return axial[:, None] * gains * scale[None, :]


def jittered_times(duration: float, hz: float, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Sample instants on [0, duration] with per-step jitter, endpoints exact."""
    n_steps = int(math.ceil(duration * hz * (1.0 + jitter))) + 2
    steps = (1.0 + rng.uniform(-jitter, jitter, size=n_steps)) / hz
    t = np.concatenate([[0.0], np.cumsum(steps)])
    t = t[t < duration - 0.5 / hz]
    return np.append(t, duration)


def sor_steps(times: np.ndarray, events: list[SorEvent]) -> np.ndarray:
    """Persistent reference offsets; repeated events on a sensor accumulate."""
    out = np.zeros((len(times), N_SENSORS))
    for ev in events:
        out[times >= ev.time, ev.sensor] += ev.offset
    return out


def gen_sensor_response(
    force: TimeSeries,
    phys: FbgPhysics,
    cfg: SimConfig,
    rng: np.random.Generator,
    mirror: bool = False,
) -> tuple[TimeSeries, list[SorEvent]]:
    """Interrogator readings (nm, 3 channels) for a dense force series."""
    geometry = draw_geometry(force, cfg, rng, mirror)
    events = [g.sor for g in geometry if g.sor is not None]
    shift = noiseless_shift(force, phys, geometry)

    times = jittered_times(cfg.duration, cfg.interrogator_hz, cfg.interrogator_jitter, rng)
    sampled = np.column_stack([np.interp(times, force.timestamps, shift[:, s]) for s in range(N_SENSORS)])
    reference = np.asarray(phys.lambda_b)[None, :]
    noise = rng.normal(0.0, cfg.noise_sigma, size=sampled.shape)
    if mirror:
        noise = -noise
    values = reference + sampled + sor_steps(times, events) + noise
    return TimeSeries(times, values), events


def gen_episode(cfg: SimConfig, index: int, phys: FbgPhysics | None = None) -> Episode:
    phys = phys or FbgPhysics()
    draw = _draw_index(cfg, index)
    force = gen_force_profile(cfg, index)
    interrogator, events = gen_sensor_response(
        force, phys, cfg, episode_rng(cfg, draw, _SENSOR), mirror=draw != index
    )
    scale_times = jittered_times(cfg.duration, cfg.scale_hz, cfg.scale_jitter, episode_rng(cfg, draw, _SCALE))
    scale = TimeSeries(scale_times, np.interp(scale_times, force.timestamps, force.values[:, 0]))
    logger.debug("episode %d: %d pokes, %d SoR events", index, len(poke_runs(force)), len(events))
    return Episode(
        interrogator=interrogator,
        scale=scale,
        sor_events=events,
        seed=episode_seed(cfg, index),
        duration=cfg.duration,
        index=index,
    )


def _gen_episode_args(args: tuple[SimConfig, int, FbgPhysics]) -> Episode:
    return gen_episode(args[0], args[1], args[2])


def episode_record(ep: Episode) -> dict:
    return {
        "index": ep.index,
        "seed": ep.seed,
        "duration": ep.duration,
        "sor_events": [asdict(ev) for ev in ep.sor_events],
    }


def gen_dataset(
    cfg: SimConfig,
    phys: FbgPhysics | None = None,
    workers: int = 1,
) -> tuple[list[Episode], dict]:
    """Generate cfg.episodes episodes and a manifest of their ground truth.

    Episodes depend only on (cfg.seed, index), so worker count does not
    change the output.
    """
    phys = phys or FbgPhysics()
    jobs = [(cfg, i, phys) for i in range(cfg.episodes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(_gen_episode_args, jobs))
    else:
        episodes = [_gen_episode_args(job) for job in jobs]

    config = {"simulate": asdict(cfg), "physics": asdict(phys)}
    manifest = {
        "generator": "fbgforce.simulate",
        "config": config,
        "config_hash": config_hash(config),
        "sor_accumulates": True,
        "episodes": [{**episode_record(ep), "mirror_of": mirror_source(cfg, ep.index)} for ep in episodes],
    }
    logger.info("generated %d episodes (seed=%d)", len(episodes), cfg.seed)
    return episodes, manifest


def gen_spectrum(bragg: float, cfg: SpectrumConfig, rng: np.random.Generator) -> SpectrumFrame:
    """Gaussian reflection peak centred on bragg plus white noise of sigma 1/snr."""
    grid = cfg.grid
    margin = 2.0 * cfg.fwhm
    if bragg - grid[0] < margin or grid[-1] - bragg < margin:
        raise EdgeError(
            f"Bragg wavelength {bragg} nm is within {margin} nm of the grid edge "
            f"[{grid[0]}, {grid[-1]}]"
        )
    intensity = np.exp(-4.0 * math.log(2.0) * (grid - bragg) ** 2 / cfg.fwhm**2)
    if math.isfinite(cfg.snr):
        intensity = intensity + rng.normal(0.0, 1.0 / cfg.snr, size=grid.shape)
    return SpectrumFrame(grid=grid, intensity=intensity)


def gen_spectrum_frames(
    n_frames: int,
    cfg: SpectrumConfig,
    phys: FbgPhysics | None = None,
) -> list[list[SpectrumFrame]]:
    """0 g spectra: n_frames per sensor, each centred on the sensor's reference."""
    phys = phys or FbgPhysics()
    frames: list[list[SpectrumFrame]] = []
    for sensor, bragg in enumerate(phys.lambda_b):
        rng = np.random.default_rng([cfg.seed, sensor])
        per_sensor = []
        for k in range(n_frames):
            frame = gen_spectrum(bragg, cfg, rng)
            per_sensor.append(
                SpectrumFrame(grid=frame.grid, intensity=frame.intensity, sensor=sensor, time=k / 1000.0)
            )
        frames.append(per_sensor)
    return frames


def shift_statistics(
    episodes: Iterable[Episode],
    phys: FbgPhysics | None = None,
    limit: float = 0.5,
    bins: int = 201,
) -> list[dict]:
    """Per-channel skewness and histogram mode of the true wavelength shift.

    Moments are accumulated episode by episode so long runs never hold every
    sample in memory. Skewness is the population (biased) estimator.
    """
    phys = phys or FbgPhysics()
    reference = np.asarray(phys.lambda_b)[None, :]
    edges = np.linspace(-limit, limit, bins + 1)
    counts = np.zeros((N_SENSORS, bins), dtype=np.int64)
    power_sums = np.zeros((4, N_SENSORS))
    for ep in episodes:
        shift = ep.interrogator.values - reference
        for k in range(4):
            power_sums[k] += np.sum(shift**k, axis=0)
        for s in range(N_SENSORS):
            counts[s] += np.histogram(shift[:, s], bins=edges)[0]

    out = []
    for s in range(N_SENSORS):
        n, s1, s2, s3 = power_sums[:, s]
        mean = s1 / n
        m2 = s2 / n - mean**2
        m3 = s3 / n - 3 * mean * s2 / n + 2 * mean**3
        mode = int(np.argmax(counts[s]))
        out.append(
            {
                "sensor": s,
                "samples": int(n),
                "skew": float(m3 / m2**1.5),
                "mode_center": float((edges[mode] + edges[mode + 1]) / 2),
                "bin_width": float(edges[1] - edges[0]),
            }
        )
    return out
