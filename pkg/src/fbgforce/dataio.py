"""File formats: episode CSV sets, predictions, spectra, npz checkpoints and windows.

Every write goes through a temp file in the target directory followed by
os.replace, so readers never observe a partial file.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import zipfile
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fbgforce.core import (
    N_SENSORS,
    Episode,
    FbgForceError,
    SorEvent,
    SpectrumFrame,
    TimeSeries,
)
from fbgforce.manifest import dumps

logger = logging.getLogger(__name__)

INTERROGATOR_CSV = "interrogator.csv"
SCALE_CSV = "scale.csv"
SIDECAR = "episode.json"
WINDOWS_FILE = "windows.npz"
CHECKPOINT_VERSION = 1

INTERROGATOR_HEADER = ("time",) + tuple(f"s{i}" for i in range(N_SENSORS))
SCALE_HEADER = ("time", "force")
PREDICTION_HEADER = ("time", "real", "pred")


class ParseError(FbgForceError):
    def __init__(self, message: str, line_number: int | None = None, path: Path | None = None):
        self.line_number = line_number
        self.path = path
        where = f"{path}:" if path else ""
        prefix = f"{where}line {line_number}: " if line_number else (f"{path}: " if path else "")
        super().__init__(prefix + message)


class IoError(FbgForceError, OSError):
    pass


class MissingFile(FbgForceError, FileNotFoundError):
    pass


class EmptyEpisode(FbgForceError, ValueError):
    pass


class LengthMismatch(FbgForceError, ValueError):
    pass


class InvalidEpisode(FbgForceError, ValueError):
    def __init__(self, violations: list[str], path: Path | None = None):
        self.violations = violations
        self.path = path
        super().__init__(f"{path or 'episode'}: " + "; ".join(violations))


class CorruptCheckpoint(FbgForceError):
    pass


@contextmanager
def atomic_open(path: Path | str, mode: str = "w") -> Iterator:
    """Open a temp file next to path; it replaces path only if the block succeeds."""
    path = Path(path)
    try:
        fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=".fbgforce_", suffix=".tmp")
    except OSError as e:
        raise IoError(f"cannot write to {path.parent}: {e}") from e
    try:
        if "b" in mode:
            f = os.fdopen(fd, mode)
        else:
            f = os.fdopen(fd, mode, encoding="utf-8", newline="\n")
        with f:
            yield f
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    with atomic_open(path, "w") as f:
        f.write(text)


def _ensure_dir(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {directory}: {e}") from e


def format_csv(header: tuple[str, ...], columns: list[np.ndarray]) -> str:
    """CSV text with 17 significant digits so floats survive the round-trip."""
    lines = [",".join(header)]
    for row in zip(*columns):
        lines.append(",".join(f"{float(v):.17g}" for v in row))
    return "\n".join(lines) + "\n"


def read_csv(path: Path | str, header: tuple[str, ...] | None = None) -> tuple[list[str], np.ndarray]:
    """Parse a numeric CSV. header, when given, must match exactly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} not found")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file, expected a header", 1, path)

    columns = lines[0].split(",")
    if header is not None and tuple(columns) != header:
        raise ParseError(f"expected header '{','.join(header)}', got '{lines[0]}'", 1, path)

    rows = np.empty((len(lines) - 1, len(columns)))
    for n, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(columns):
            raise ParseError(f"expected {len(columns)} fields, got {len(cells)}", n, path)
        try:
            rows[n - 2] = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"malformed number in '{line}'", n, path) from None
    return columns, rows


def read_series(path: Path | str, header: tuple[str, ...]) -> TimeSeries:
    _, rows = read_csv(path, header)
    return TimeSeries(rows[:, 0], rows[:, 1:])


@dataclass(frozen=True)
class EpisodeFileSet:
    directory: Path
    interrogator: Path
    scale: Path
    sidecar: Path

    @classmethod
    def at(cls, directory: Path | str) -> EpisodeFileSet:
        d = Path(directory)
        return cls(directory=d, interrogator=d / INTERROGATOR_CSV, scale=d / SCALE_CSV, sidecar=d / SIDECAR)


def write_episode(ep: Episode, directory: Path | str, config_hash: str | None = None) -> EpisodeFileSet:
    if len(ep.interrogator) == 0 or len(ep.scale) == 0:
        raise EmptyEpisode(f"episode {ep.index} has no samples")
    violations = ep.violations()
    if violations:
        raise InvalidEpisode(violations)

    files = EpisodeFileSet.at(directory)
    _ensure_dir(files.directory)
    atomic_write_text(
        files.interrogator,
        format_csv(INTERROGATOR_HEADER, [ep.interrogator.timestamps, *ep.interrogator.values.T]),
    )
    atomic_write_text(files.scale, format_csv(SCALE_HEADER, [ep.scale.timestamps, ep.scale.values[:, 0]]))
    sidecar = {
        "index": ep.index,
        "seed": ep.seed,
        "duration": ep.duration,
        "sor_events": [asdict(ev) for ev in ep.sor_events],
    }
    if config_hash is not None:
        sidecar["config_hash"] = config_hash
    atomic_write_text(files.sidecar, dumps(sidecar))
    logger.debug("wrote episode %d to %s", ep.index, files.directory)
    return files


def read_episode(directory: Path | str) -> Episode:
    files = EpisodeFileSet.at(directory)
    interrogator = read_series(files.interrogator, INTERROGATOR_HEADER)
    scale = read_series(files.scale, SCALE_HEADER)
    if len(interrogator) == 0 or len(scale) == 0:
        raise EmptyEpisode(f"{files.directory} has no samples")

    meta: dict = {}
    if files.sidecar.is_file():
        try:
            meta = json.loads(files.sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, e.lineno, files.sidecar) from None
    events = [SorEvent(**ev) for ev in meta.get("sor_events", [])]
    ep = Episode(
        interrogator=interrogator,
        scale=scale,
        sor_events=events,
        seed=int(meta.get("seed", 0)),
        duration=float(meta.get("duration", interrogator.end)),
        index=int(meta.get("index", 0)),
    )
    violations = ep.violations()
    if violations:
        raise InvalidEpisode(violations, files.directory)
    return ep


def episode_dirs(root: Path | str) -> list[Path]:
    """Episode directories under a dataset root, in index order."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"dataset directory {root} not found")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / INTERROGATOR_CSV).is_file())


def read_dataset(root: Path | str) -> list[Episode]:
    return [read_episode(d) for d in episode_dirs(root)]


def write_predictions(times, real, pred, path: Path | str) -> Path:
    columns = [np.asarray(c, dtype=np.float64).ravel() for c in (times, real, pred)]
    lengths = {c.size for c in columns}
    if len(lengths) != 1:
        raise LengthMismatch(f"times/real/pred lengths differ: {[c.size for c in columns]}")
    path = Path(path)
    atomic_write_text(path, format_csv(PREDICTION_HEADER, columns))
    return path


def read_predictions(path: Path | str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, rows = read_csv(path, PREDICTION_HEADER)
    return rows[:, 0], rows[:, 1], rows[:, 2]


def write_spectra(frames: list[SpectrumFrame], path: Path | str) -> Path:
    """One wavelength column plus one intensity column per frame; grids must match."""
    if not frames:
        raise EmptyEpisode("no spectrum frames to write")
    grid = frames[0].grid
    for f in frames[1:]:
        if f.grid.shape != grid.shape or not np.array_equal(f.grid, grid):
            raise LengthMismatch("spectrum frames use different wavelength grids")
    header = ("wavelength",) + tuple(f"frame{k}" for k in range(len(frames)))
    path = Path(path)
    atomic_write_text(path, format_csv(header, [grid, *(f.intensity for f in frames)]))
    return path


def read_spectra(path: Path | str, sensor: int = 0) -> list[SpectrumFrame]:
    columns, rows = read_csv(path)
    if columns[0] != "wavelength" or len(columns) < 2:
        raise ParseError(f"expected 'wavelength,<frame>...' header, got '{','.join(columns)}'", 1, Path(path))
    grid = rows[:, 0]
    return [
        SpectrumFrame(grid=grid, intensity=rows[:, k], sensor=sensor, time=float(k - 1))
        for k in range(1, len(columns))
    ]


def save_arrays(path: Path | str, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """npz of little-endian f64 arrays plus a JSON '__meta__' entry."""
    payload = {name: np.ascontiguousarray(a, dtype="<f8") for name, a in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    _ensure_dir(path.parent)
    with atomic_open(path, "wb") as f:
        np.savez(f, **payload)
    return path


def load_arrays(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} not found")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {name: npz[name] for name in npz.files}
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from e
    if "__meta__" not in arrays:
        raise CorruptCheckpoint(f"{path}: missing __meta__ entry")
    meta = json.loads(arrays.pop("__meta__").item())
    return arrays, meta


def save_windows(path: Path | str, episodes: list, meta: dict | None = None) -> Path:
    """Store EpisodeWindows records as x_<i>, y_<i>, time_<i> arrays."""
    arrays: dict[str, np.ndarray] = {}
    for i, ew in enumerate(episodes):
        arrays[f"x_{i}"] = ew.x
        arrays[f"y_{i}"] = ew.y
        arrays[f"time_{i}"] = ew.times
    info = dict(meta or {})
    info.update({"kind": "windows", "version": CHECKPOINT_VERSION, "episodes": [ew.index for ew in episodes]})
    return save_arrays(path, arrays, info)


def load_windows(path: Path | str) -> list:
    from fbgforce.preprocess import EpisodeWindows

    path = Path(path)
    if path.is_dir():
        path = path / WINDOWS_FILE
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "windows":
        raise CorruptCheckpoint(f"{path} is not a windows file")
    return [
        EpisodeWindows(x=arrays[f"x_{i}"], y=arrays[f"y_{i}"], times=arrays[f"time_{i}"], index=int(index))
        for i, index in enumerate(meta["episodes"])
    ]
