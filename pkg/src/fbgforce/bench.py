"""Experiment harness: two-phase model sweep, latency, SoR ablation, peak comparison.

Every result type renders as CSV and as an aligned text table. Timing fields
are the only values that differ between identical reruns.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fbgforce.core import N_SENSORS, WINDOW_ROWS, ConfigError, FbgForceError, FbgPhysics
from fbgforce.estimators import ModelKind, ModelParams, ModelSpec, SequencePredictor
from fbgforce.manifest import host_descriptor
from fbgforce.peakdetect import (
    KdeParams,
    NoPeak,
    baseline_peak,
    compare_stats,
    peak_wavelength,
)
from fbgforce.preprocess import EpisodeWindows
from fbgforce.simulate import SpectrumConfig, gen_spectrum_frames
from fbgforce.training import TrainConfig, fit, depth_lr

logger = logging.getLogger(__name__)

WARMUP_FRACTION = 0.1
MIN_PEAK_FRAMES = 100


class EmptyRun(FbgForceError, ValueError):
    pass


def format_table(header: list[str], rows: list[list]) -> str:
    """Left-aligned plain-text table; floats with 4 significant digits."""

    def cell(v) -> str:
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4g}"
        return "" if v is None else str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max([len(h)] + [len(r[i]) for r in body]) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in body]
    return "\n".join(lines) + "\n"


def format_csv(header: list[str], rows: list[list]) -> str:
    def cell(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(float(v))
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# -- sweep -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepGrid:
    kinds: tuple[str, ...] = ("fcn", "rnn", "transformer")
    layers: tuple[int, ...] = (1, 2, 4, 8)
    hiddens: tuple[int, ...] = (64, 128, 256, 512, 1024)
    base_hidden: int = 256  # hidden size held fixed while layers are swept
    seeds: tuple[int, ...] = (0,)
    lr_policy: str = "depth"  # "depth" uses depth_lr(spec); "fixed" keeps TrainConfig.lr

    def __post_init__(self):
        for name in ("kinds", "layers", "hiddens", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.lr_policy not in ("depth", "fixed"):
            raise ConfigError(f"lr_policy must be 'depth' or 'fixed', got {self.lr_policy!r}")


@dataclass(frozen=True)
class SweepRow:
    kind: str
    layers: int
    hidden: int
    heads: int
    seed: int
    phase: int
    status: str = "ok"
    test_mae: float | None = None
    val_mae: float | None = None
    train_time_s: float | None = None
    reused: bool = False
    error: str = ""

    @property
    def cell(self) -> tuple[str, int, int]:
        return (self.kind, self.layers, self.hidden)

    @property
    def score(self) -> float:
        if self.status != "ok":
            return math.inf
        return self.test_mae if self.test_mae is not None else self.val_mae


SWEEP_COLUMNS = [
    "kind", "layers", "hidden", "heads", "seed", "phase", "status",
    "test_mae", "val_mae", "train_time_s", "reused", "error",
]


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    best_layers: dict[str, int] = field(default_factory=dict)

    def _table_rows(self) -> list[list]:
        return [[getattr(r, c) for c in SWEEP_COLUMNS] for r in self.rows]

    def to_csv(self) -> str:
        return format_csv(SWEEP_COLUMNS, self._table_rows())

    def to_table(self) -> str:
        return format_table(SWEEP_COLUMNS, self._table_rows())

    def as_dict(self, timings: bool = True) -> dict:
        rows = [asdict(r) for r in self.rows]
        if not timings:
            for r in rows:
                r.pop("train_time_s")
        return {"rows": rows, "best_layers": self.best_layers}


def _run_cell(job: tuple[ModelSpec, int, int, list[EpisodeWindows], TrainConfig]) -> SweepRow:
    spec, seed, phase, episodes, cfg = job
    base = dict(kind=spec.kind.value, layers=spec.layers, hidden=spec.hidden, heads=spec.heads, seed=seed, phase=phase)
    started = time.perf_counter()
    try:
        result = fit(spec, episodes, replace(cfg, seed=seed))
    except (FbgForceError, ValueError, FloatingPointError) as e:
        logger.warning("cell %s seed %d failed: %s", spec.label, seed, e)
        return SweepRow(**base, status="failed", error=str(e))
    elapsed = time.perf_counter() - started
    logger.info("cell %s seed %d: val %.3f g, test %s", spec.label, seed, result.val_mae, result.test_mae)
    return SweepRow(
        **base, test_mae=result.test_mae, val_mae=result.val_mae, train_time_s=elapsed
    )


def _cell_spec(kind: str, layers: int, hidden: int) -> ModelSpec:
    return ModelSpec(kind=ModelKind(kind), layers=layers, hidden=hidden)


def _run_cells(jobs, workers: int) -> list[SweepRow]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(job) for job in jobs]


def _jobs(cells, phase, grid: SweepGrid, episodes, cfg: TrainConfig):
    jobs = []
    for kind, layers, hidden in cells:
        spec = _cell_spec(kind, layers, hidden)
        cell_cfg = replace(cfg, lr=depth_lr(spec)) if grid.lr_policy == "depth" else cfg
        jobs += [(spec, seed, phase, episodes, cell_cfg) for seed in grid.seeds]
    return jobs


def run_sweep(
    grid: SweepGrid,
    episodes: list[EpisodeWindows],
    cfg: TrainConfig,
    workers: int = 1,
) -> SweepResult:
    """Layers swept at base_hidden, then hiddens swept at each kind's best layer count.

    Phase 2 reuses the phase-1 cell it shares instead of retraining it. Cells
    that raise are recorded as failed and the sweep continues.
    """
    result = SweepResult()
    phase1 = [(k, layers, grid.base_hidden) for k in grid.kinds for layers in grid.layers]
    result.rows += _run_cells(_jobs(phase1, 1, grid, episodes, cfg), workers)

    for kind in grid.kinds:
        scores = {}
        for layers in grid.layers:
            runs = [r.score for r in result.rows if r.cell == (kind, layers, grid.base_hidden)]
            scores[layers] = float(np.median(runs)) if runs else math.inf
        finite = {layers: s for layers, s in scores.items() if math.isfinite(s)}
        if finite:
            result.best_layers[kind] = min(finite, key=lambda layers: (finite[layers], layers))

    if not grid.hiddens:
        return result
    done = {(r.cell, r.seed): r for r in result.rows}
    phase2 = []
    for kind, layers in result.best_layers.items():
        for hidden in grid.hiddens:
            cell = (kind, layers, hidden)
            if all((cell, seed) in done for seed in grid.seeds):
                result.rows += [replace(done[(cell, seed)], phase=2, reused=True) for seed in grid.seeds]
            else:
                phase2.append(cell)
    result.rows += _run_cells(_jobs(phase2, 2, grid, episodes, cfg), workers)
    result.rows.sort(key=lambda r: (grid.kinds.index(r.kind), r.phase, r.layers, r.hidden, r.seed))
    return result


# -- latency -----------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    model: str
    n: int
    mean_ms: float
    p99_ms: float
    host: dict

    def as_dict(self) -> dict:
        return asdict(self)


def measure_latency(
    model: ModelParams,
    n_windows: int = 200,
    repetitions: int = 5,
    seed: int = 0,
) -> LatencyReport:
    """Per-window wall time of causal single-window inference.

    The input stream is seeded noise at the interrogator's scale. Each
    repetition replays the stream from a fresh predictor state; the first 10%
    of all timings are discarded as warmup.
    """
    if n_windows <= 0 or repetitions <= 0:
        raise EmptyRun(f"need n_windows and repetitions > 0, got {n_windows} and {repetitions}")
    stream = np.random.default_rng(seed).normal(0.0, 0.01, size=(n_windows, WINDOW_ROWS, N_SENSORS))
    predictor = SequencePredictor(model)
    timings = []
    for _ in range(repetitions):
        predictor.reset()
        for window in stream:
            started = time.perf_counter()
            predictor.step(window)
            timings.append(time.perf_counter() - started)
    kept = np.array(timings[int(len(timings) * WARMUP_FRACTION) :]) * 1e3
    return LatencyReport(
        model=model.spec.label,
        n=len(kept),
        mean_ms=float(kept.mean()),
        p99_ms=float(np.percentile(kept, 99)),
        host=host_descriptor(),
    )


# -- SoR ablation ------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    model: str
    mae_free: float
    mae_heavy: float
    free_runs: tuple[float, ...]
    heavy_runs: tuple[float, ...]


@dataclass
class AblationResult:
    rows: list[AblationRow]
    gaps: dict[str, float | None]

    HEADER = ["model", "mae_free", "mae_heavy", "free_runs", "heavy_runs"]

    def _table_rows(self) -> list[list]:
        def runs(values) -> str:
            return " ".join(f"{v:.4g}" for v in values)

        return [[r.model, r.mae_free, r.mae_heavy, runs(r.free_runs), runs(r.heavy_runs)] for r in self.rows]

    def to_csv(self) -> str:
        return format_csv(self.HEADER, self._table_rows())

    def to_table(self) -> str:
        gaps = [[name, value] for name, value in self.gaps.items()]
        return format_table(self.HEADER, self._table_rows()) + "\n" + format_table(["gap", "rnn_minus_fcn"], gaps)

    def as_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "gaps": self.gaps}


def _heldout_mae(spec: ModelSpec, episodes, cfg: TrainConfig) -> float:
    result = fit(spec, episodes, cfg)
    return result.test_mae if result.test_mae is not None else result.val_mae


def sor_ablation(
    sor_free: list[EpisodeWindows],
    sor_heavy: list[EpisodeWindows],
    specs: list[ModelSpec],
    cfg: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
) -> AblationResult:
    """Median held-out MAE per spec on both datasets, plus the RNN-minus-FCN gap on each."""
    rows = []
    for spec in specs:
        free = tuple(_heldout_mae(spec, sor_free, replace(cfg, seed=s)) for s in seeds)
        heavy = tuple(_heldout_mae(spec, sor_heavy, replace(cfg, seed=s)) for s in seeds)
        logger.info("%s: free %.3f g, heavy %.3f g", spec.label, np.median(free), np.median(heavy))
        rows.append(
            AblationRow(
                model=spec.label,
                mae_free=float(np.median(free)),
                mae_heavy=float(np.median(heavy)),
                free_runs=free,
                heavy_runs=heavy,
            )
        )

    def first(kind: ModelKind) -> AblationRow | None:
        return next((r for r, s in zip(rows, specs) if s.kind is kind), None)

    fcn, rnn = first(ModelKind.FCN), first(ModelKind.RNN)
    gaps: dict[str, float | None] = {"sor_free": None, "sor_heavy": None}
    if fcn is not None and rnn is not None:
        gaps = {"sor_free": rnn.mae_free - fcn.mae_free, "sor_heavy": rnn.mae_heavy - fcn.mae_heavy}
    return AblationResult(rows=rows, gaps=gaps)


# -- peak detection comparison -----------------------------------------------


@dataclass
class PeakComparison:
    """Mean and std of picked peaks per sensor for the KDE and baseline pickers."""

    bragg: tuple[float, ...]
    kde: list[tuple[float, float]]
    baseline: list[tuple[float, float]]
    kde_missed: list[int]

    @property
    def header(self) -> list[str]:
        cols = ["method"]
        for s in range(len(self.bragg)):
            cols += [f"s{s}_mean", f"s{s}_std"]
        return cols

    def _table_rows(self) -> list[list]:
        rows = []
        for name, stats in (("kde", self.kde), ("baseline", self.baseline)):
            rows.append([name] + [v for pair in stats for v in pair])
        return rows

    def to_csv(self) -> str:
        return format_csv(self.header, self._table_rows())

    def to_table(self) -> str:
        return format_table(self.header, self._table_rows())

    def as_dict(self) -> dict:
        return asdict(self)


def peak_comparison(
    n_frames: int,
    spec_cfg: SpectrumConfig | None = None,
    kde_params: KdeParams | None = None,
    phys: FbgPhysics | None = None,
) -> PeakComparison:
    """Pick peaks on n_frames 0 g spectra per sensor with both pickers.

    Frames where the KDE picker finds no peak are counted in kde_missed and
    left out of its statistics.
    """
    if n_frames < MIN_PEAK_FRAMES:
        raise EmptyRun(f"peak comparison needs >= {MIN_PEAK_FRAMES} frames, got {n_frames}")
    spec_cfg = spec_cfg or SpectrumConfig()
    kde_params = kde_params or KdeParams()
    phys = phys or FbgPhysics()

    kde, baseline, missed = [], [], []
    for frames in gen_spectrum_frames(n_frames, spec_cfg, phys):
        picked = []
        for frame in frames:
            try:
                picked.append(peak_wavelength(frame, kde_params, fwhm=spec_cfg.fwhm))
            except NoPeak:
                pass
        base = [baseline_peak(frame) for frame in frames]
        missed.append(n_frames - len(picked))
        stats = compare_stats(picked or [math.nan], base)
        kde.append((stats.mean_a, stats.std_a))
        baseline.append((stats.mean_b, stats.std_b))
    return PeakComparison(bragg=phys.lambda_b, kde=kde, baseline=baseline, kde_missed=missed)
