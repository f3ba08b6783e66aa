from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from fbgforce import __version__
from fbgforce.bench import (
    measure_latency,
    peak_comparison,
    run_sweep,
    sor_ablation,
)
from fbgforce.config import Config
from fbgforce.core import INTERROGATOR_HZ, WINDOW_ROWS, ConfigError, FbgForceError
from fbgforce.dataio import (
    INTERROGATOR_HEADER,
    WINDOWS_FILE,
    ParseError,
    atomic_write_text,
    read_dataset,
    read_series,
    read_spectra,
    load_windows,
    save_windows,
    write_episode,
    write_predictions,
    write_spectra,
)
from fbgforce.estimators import (
    InvalidSpec,
    ModelKind,
    ModelParams,
    ModelSpec,
    SequencePredictor,
    build_model,
    predict_episode,
)
from fbgforce.manifest import build_manifest, dumps, host_descriptor, write_manifest
from fbgforce.peakdetect import NoPeak, baseline_peak, peak_wavelength
from fbgforce.preprocess import (
    TooFewSamples,
    StreamWindower,
    estimate_reference,
    label_times,
    prepare_dataset,
    resample_cubic,
    compute_shift,
)
from fbgforce.simulate import gen_dataset, gen_spectrum_frames
from fbgforce.training import (
    evaluate_mae,
    fit,
    depth_lr,
    predict_dataset,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
# One 60 s episode of windows.
STREAM_HISTORY = 600
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# Invalid input from the command line or config file.
USAGE_ERRORS = (ConfigError, InvalidSpec)


class FbgForceGroup(click.Group):
    """Maps library errors to exit codes: usage errors to 2, everything else to 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except USAGE_ERRORS as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_USAGE) from None
        except (FbgForceError, OSError) as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_RUNTIME) from None


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    logging.captureWarnings(True)


@click.group(cls=FbgForceGroup)
@click.version_option(version=__version__, prog_name="fbgforce")
@click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(),
    help="YAML config file layered over the built-in defaults.",
)
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug logging on stderr.")
@click.pass_context
def cli(ctx, config_path, verbose):
    """Contact-force estimation from FBG wavelength shifts."""
    _configure_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


def _config(ctx, **overrides) -> Config:
    return Config.load(ctx.obj["config_path"], overrides)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_windows_or_episodes(data: Path, workers: int = 1):
    """A windows file, a directory holding one, or a directory of episode file sets."""
    if data.is_file() or (data / WINDOWS_FILE).is_file():
        return load_windows(data)
    return prepare_dataset(read_dataset(data), workers=workers)


# -- generate ----------------------------------------------------------------


@cli.command()
@click.option("--episodes", type=click.IntRange(min=1), default=None, help="Episodes to simulate.")
@click.option("--duration", type=click.FloatRange(min=0, min_open=True), default=None, help="Seconds per episode.")
@click.option("--sor-prob", type=click.FloatRange(0, 1), default=None, help="Per-poke Shift-of-Reference probability.")
@click.option("--seed", type=int, default=None, help="Dataset seed.")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Parallel worker processes.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output dataset directory.")
@click.pass_context
def generate(ctx, episodes, duration, sor_prob, seed, workers, out):
    """Simulate episodes and write one file set per episode plus a manifest."""
    cfg = _config(ctx, simulate={"episodes": episodes, "duration": duration, "sor_prob": sor_prob, "seed": seed})
    out_dir = _out_dir(out)
    eps, truth = gen_dataset(cfg.simulate, cfg.physics, workers=workers)
    for ep in eps:
        write_episode(ep, out_dir / f"ep_{ep.index:04d}", config_hash=truth["config_hash"])
    manifest = build_manifest(
        "generate",
        truth["config"],
        generator=truth["generator"],
        sor_accumulates=truth["sor_accumulates"],
        episodes=truth["episodes"],
    )
    write_manifest(manifest, out_dir / MANIFEST)
    click.echo(f"Wrote {len(eps)} episode(s) to {out_dir} ({manifest['config_hash']}).")


# -- peaks -------------------------------------------------------------------


@cli.command()
@click.option("--input", "input_path", default=None, type=click.Path(), help="Spectra CSV (wavelength,<frame>...).")
@click.option("--frames", type=click.IntRange(min=1), default=10, help="Frames to simulate when no --input is given.")
@click.option("--sensor", type=click.IntRange(0, 2), default=0, help="Sensor whose 0 g spectra are simulated.")
@click.option("--snr", type=click.FloatRange(min=0, min_open=True), default=None, help="Simulated peak-to-noise ratio.")
@click.option("--write", "write_path", default=None, type=click.Path(), help="Also save the simulated spectra CSV.")
@click.option("--k", type=click.IntRange(min=1), default=None, help="KDE context half-width.")
@click.option("--w", type=click.IntRange(min=1), default=None, help="KDE bandwidth spacing.")
@click.option("--h", type=click.FloatRange(min=0, min_open=True), default=None, help="Chebyshev multiplier.")
@click.option("--fwhm", type=click.FloatRange(min=0, min_open=True), default=None, help="Grating reflection FWHM, nm.")
@click.option("--manifest", "manifest_path", default=None, type=click.Path(), help="Write picks and config as JSON.")
@click.pass_context
def peaks(ctx, input_path, frames, sensor, snr, write_path, k, w, h, fwhm, manifest_path):
    """Pick the Bragg peak of each spectrum with the KDE and baseline pickers."""
    cfg = _config(ctx, spectrum={"snr": snr, "fwhm": fwhm}, kde={"k": k, "w": w, "h": h})
    if input_path is not None:
        spectra = read_spectra(input_path, sensor=sensor)
    else:
        spectra = gen_spectrum_frames(frames, cfg.spectrum, cfg.physics)[sensor]
        if write_path is not None:
            write_spectra(spectra, write_path)

    click.echo("frame,kde,baseline")
    kde_picks, baseline_picks = [], []
    for n, frame in enumerate(spectra):
        try:
            kde = peak_wavelength(frame, cfg.kde, fwhm=cfg.spectrum.fwhm)
        except NoPeak:
            kde = None
        baseline = baseline_peak(frame)
        kde_picks.append(kde)
        baseline_picks.append(baseline)
        click.echo(f"{n},{'' if kde is None else repr(kde)},{baseline!r}")

    if manifest_path is not None:
        config = cfg.as_dict()
        manifest = build_manifest(
            "peaks",
            {"spectrum": config["spectrum"], "kde": config["kde"], "physics": config["physics"], "sensor": sensor},
            source=str(input_path) if input_path is not None else "simulated",
            frames=len(spectra),
            kde=kde_picks,
            baseline=baseline_picks,
        )
        write_manifest(manifest, manifest_path)


# -- preprocess --------------------------------------------------------------


@cli.command()
@click.option("--data", required=True, type=click.Path(), help="Dataset directory written by generate.")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Parallel worker processes.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory for windows.npz.")
@click.pass_context
def preprocess(ctx, data, workers, out):
    """Resample, align and window every episode of a dataset."""
    cfg = _config(ctx)
    windows = prepare_dataset(read_dataset(data), workers=workers)
    out_dir = _out_dir(out)
    save_windows(out_dir / WINDOWS_FILE, windows)
    manifest = build_manifest(
        "preprocess",
        {"physics": cfg.as_dict()["physics"]},
        source=str(data),
        episodes={str(ew.index): len(ew) for ew in windows},
    )
    write_manifest(manifest, out_dir / MANIFEST)
    click.echo(f"Wrote {sum(len(ew) for ew in windows)} window(s) from {len(windows)} episode(s) to {out_dir}.")


# -- train / eval ------------------------------------------------------------


@cli.command()
@click.option("--model", "kind", type=click.Choice([k.value for k in ModelKind]), default=None, help="Model family.")
@click.option("--layers", type=int, default=None, help="Hidden layers / GRU layers / attention blocks.")
@click.option("--hidden", type=int, default=None, help="Hidden dimension.")
@click.option("--heads", type=int, default=None, help="Attention heads (transformer only).")
@click.option("--lr", type=click.FloatRange(min=0, min_open=True), default=None, help="Adam learning rate.")
@click.option("--depth-lr", "use_depth_lr", is_flag=True, help="Use 1e-5 for rnn-8 and transformer-4/8, 1e-3 otherwise.")
@click.option("--epochs", type=click.IntRange(min=1), default=None, help="Maximum epochs.")
@click.option("--patience", type=click.IntRange(min=0), default=None, help="Early-stopping patience in epochs.")
@click.option("--batch", type=click.IntRange(min=1), default=None, help="FCN minibatch size.")
@click.option("--seed", type=int, default=None, help="Initialisation and shuffling seed.")
@click.option("--data", required=True, type=click.Path(), help="Dataset directory or windows.npz.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory for the checkpoint.")
@click.pass_context
def train(ctx, kind, layers, hidden, heads, lr, use_depth_lr, epochs, patience, batch, seed, data, out):
    """Train one estimator and report its validation and test MAE."""
    model_overrides = {"kind": kind, "layers": layers, "hidden": hidden, "heads": heads}
    cfg = _config(
        ctx,
        model=model_overrides,
        train={"lr": lr, "max_epochs": epochs, "patience": patience, "batch": batch, "seed": seed},
    )
    spec = cfg.model
    train_cfg = cfg.train
    if use_depth_lr and lr is None:
        train_cfg = replace(train_cfg, lr=depth_lr(spec))

    episodes = _load_windows_or_episodes(Path(data))
    result = fit(spec, episodes, train_cfg)
    out_dir = _out_dir(out)
    result.model.save(out_dir / "model.npz")
    atomic_write_text(out_dir / "history.json", dumps(result.history.as_dict()))
    config = cfg.as_dict()
    config["train"]["lr"] = train_cfg.lr
    manifest = build_manifest(
        "train",
        {"model": config["model"], "train": config["train"]},
        data=str(data),
        split=result.split.ids(),
        n_params=result.model.n_params,
        val_mae=result.val_mae,
        test_mae=result.test_mae,
        epochs_run=len(result.history.train_loss),
        best_epoch=result.history.best_epoch,
    )
    write_manifest(manifest, out_dir / MANIFEST)
    click.echo(f"{spec.label}: val MAE {result.val_mae:.3f} g")
    if result.test_mae is not None:
        click.echo(f"{spec.label}: test MAE {result.test_mae:.3f} g")


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(), help="Checkpoint written by train.")
@click.option("--data", required=True, type=click.Path(), help="Dataset directory or windows.npz.")
@click.option("--predictions", default=None, type=click.Path(), help="Directory for per-episode time,real,pred CSVs.")
@click.option("--manifest", "manifest_path", default=None, type=click.Path(), help="Write the score and inputs as JSON.")
def evaluate(model_path, data, predictions, manifest_path):
    """Mean absolute error of a checkpoint over a dataset."""
    model = ModelParams.load(model_path)
    episodes = _load_windows_or_episodes(Path(data))
    mae = evaluate_mae(model, episodes)
    if predictions is not None:
        out_dir = _out_dir(predictions)
        for ep, pred in zip(episodes, predict_dataset(model, episodes)):
            write_predictions(ep.times, ep.y, pred, out_dir / f"ep_{ep.index:04d}.csv")
    n_windows = sum(len(ep) for ep in episodes)
    if manifest_path is not None:
        manifest = build_manifest(
            "eval",
            {"model": model.spec.as_dict()},
            checkpoint=str(model_path),
            data=str(data),
            episodes=[ep.index for ep in episodes],
            windows=n_windows,
            mae=mae,
        )
        write_manifest(manifest, manifest_path)
    click.echo(f"{model.spec.label}: MAE {mae:.3f} g over {n_windows} window(s)")


# -- bench -------------------------------------------------------------------


@cli.group()
def bench():
    """Sweeps, latency, Shift-of-Reference ablation and peak-picker comparison."""


def _int_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _write_result(out_dir: Path, name: str, result, manifest: dict) -> None:
    atomic_write_text(out_dir / f"{name}.csv", result.to_csv())
    atomic_write_text(out_dir / f"{name}.txt", result.to_table())
    write_manifest(manifest, out_dir / MANIFEST)
    click.echo(result.to_table(), nl=False)


@bench.command()
@click.option("--data", required=True, type=click.Path(), help="Dataset directory or windows.npz.")
@click.option("--kinds", default=None, help="Comma-separated model kinds.")
@click.option("--layers", "layers_text", default=None, help="Comma-separated layer counts for phase 1.")
@click.option("--hiddens", "hiddens_text", default=None, help="Comma-separated hidden sizes for phase 2.")
@click.option("--base-hidden", type=click.IntRange(min=1), default=None, help="Hidden size used in phase 1.")
@click.option("--seeds", "seeds_text", default=None, help="Comma-separated training seeds.")
@click.option("--epochs", type=click.IntRange(min=1), default=None, help="Maximum epochs per cell.")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Parallel worker processes.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@click.pass_context
def sweep(ctx, data, kinds, layers_text, hiddens_text, base_hidden, seeds_text, epochs, workers, out):
    """Two-phase layer/hidden sweep over the configured model kinds."""
    cfg = _config(
        ctx,
        bench={
            "kinds": tuple(kinds.split(",")) if kinds else None,
            "layers": _int_list(layers_text),
            "hiddens": _int_list(hiddens_text),
            "base_hidden": base_hidden,
            "seeds": _int_list(seeds_text),
        },
        train={"max_epochs": epochs},
    )
    for kind in cfg.bench.kinds:
        if kind not in {k.value for k in ModelKind}:
            raise ConfigError(f"unknown model kind {kind!r} in sweep")
    episodes = _load_windows_or_episodes(Path(data), workers=workers)
    result = run_sweep(cfg.bench, episodes, cfg.train, workers=workers)
    config = cfg.as_dict()
    manifest = build_manifest(
        "bench sweep",
        {"bench": config["bench"], "train": config["train"]},
        data=str(data),
        results=result.as_dict(timings=False),
    )
    _write_result(_out_dir(out), "sweep", result, manifest)


@bench.command()
@click.option("--model", "model_path", default=None, type=click.Path(), help="Checkpoint; a fresh model is built otherwise.")
@click.option("--kind", type=click.Choice([k.value for k in ModelKind]), default="fcn", help="Model family without --model.")
@click.option("--layers", type=click.IntRange(min=1), default=2, help="Layers without --model.")
@click.option("--hidden", type=click.IntRange(min=1), default=64, help="Hidden size without --model.")
@click.option("--windows", type=int, default=200, help="Windows in the input stream.")
@click.option("--repetitions", type=int, default=5, help="Passes over the input stream.")
@click.option("--out", "out", default=None, type=click.Path(), help="Directory for latency.json.")
def latency(model_path, kind, layers, hidden, windows, repetitions, out):
    """Per-window inference time on this host."""
    if model_path is not None:
        model = ModelParams.load(model_path)
    else:
        model = build_model(ModelSpec(kind=ModelKind(kind), layers=layers, hidden=hidden))
    report = measure_latency(model, n_windows=windows, repetitions=repetitions)
    click.echo(f"{report.model}: mean {report.mean_ms:.4f} ms, p99 {report.p99_ms:.4f} ms over {report.n} windows")
    if out is not None:
        manifest = build_manifest("bench latency", {"model": model.spec.as_dict()}, report=report.as_dict())
        write_manifest(manifest, _out_dir(out) / "latency.json")


def _spec_list(text: str) -> list[ModelSpec]:
    """'fcn-2-64,rnn-4-64' to ModelSpecs."""
    specs = []
    for item in text.split(","):
        parts = item.strip().split("-")
        if len(parts) != 3:
            raise click.BadParameter(f"expected kind-layers-hidden, got {item!r}")
        try:
            specs.append(ModelSpec(kind=ModelKind(parts[0]), layers=int(parts[1]), hidden=int(parts[2])))
        except ValueError as e:
            raise click.BadParameter(str(e)) from None
    return specs


@bench.command()
@click.option("--free", "free_path", default=None, type=click.Path(), help="SoR-free dataset; simulated when omitted.")
@click.option("--heavy", "heavy_path", default=None, type=click.Path(), help="SoR-heavy dataset; simulated when omitted.")
@click.option("--sor-prob", type=click.FloatRange(0, 1), default=0.7, help="sor_prob of the simulated heavy set.")
@click.option("--episodes", type=click.IntRange(min=2), default=None, help="Episodes per simulated set.")
@click.option("--specs", "specs_text", default="fcn-2-64,rnn-4-64", help="Comma-separated kind-layers-hidden.")
@click.option("--seeds", "seeds_text", default="0,1,2", help="Comma-separated training seeds.")
@click.option("--epochs", type=click.IntRange(min=1), default=None, help="Maximum epochs per run.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@click.pass_context
def sor(ctx, free_path, heavy_path, sor_prob, episodes, specs_text, seeds_text, epochs, out):
    """Compare models on SoR-free and SoR-heavy data generated with the same seed."""
    cfg = _config(ctx, simulate={"episodes": episodes}, train={"max_epochs": epochs})
    specs = _spec_list(specs_text)

    def dataset(path, prob):
        if path is not None:
            return _load_windows_or_episodes(Path(path))
        eps, _ = gen_dataset(replace(cfg.simulate, sor_prob=prob), cfg.physics)
        return prepare_dataset(eps)

    result = sor_ablation(
        dataset(free_path, 0.0),
        dataset(heavy_path, sor_prob),
        specs,
        cfg.train,
        seeds=_int_list(seeds_text),
    )
    config = cfg.as_dict()
    manifest = build_manifest(
        "bench sor",
        {"simulate": config["simulate"], "train": config["train"], "sor_prob": sor_prob},
        specs=[s.as_dict() for s in specs],
        results=result.as_dict(),
    )
    _write_result(_out_dir(out), "sor", result, manifest)


@bench.command("peaks")
@click.option("--frames", type=click.IntRange(min=100), default=1000, help="0 g frames per sensor.")
@click.option("--snr", type=click.FloatRange(min=0, min_open=True), default=None, help="Peak-to-noise ratio.")
@click.option("--out", "out", required=True, type=click.Path(), help="Output directory.")
@click.pass_context
def bench_peaks(ctx, frames, snr, out):
    """KDE versus baseline peak statistics on 0 g spectra."""
    cfg = _config(ctx, spectrum={"snr": snr})
    result = peak_comparison(frames, cfg.spectrum, cfg.kde, cfg.physics)
    config = cfg.as_dict()
    manifest = build_manifest(
        "bench peaks",
        {"spectrum": config["spectrum"], "kde": config["kde"], "physics": config["physics"], "frames": frames},
        results=result.as_dict(),
        host=host_descriptor(),
    )
    _write_result(_out_dir(out), "peaks", result, manifest)


# -- infer -------------------------------------------------------------------


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(), help="Checkpoint written by train.")
@click.option("--input", "input_path", default=None, type=click.Path(), help="Interrogator CSV (time,s0,s1,s2).")
@click.option("--stream", is_flag=True, help="Read interrogator rows from stdin and predict as windows complete.")
@click.option(
    "--history",
    type=click.IntRange(min=1),
    default=STREAM_HISTORY,
    help="Windows a streaming transformer attends over.",
)
@click.option("--manifest", "manifest_path", default=None, type=click.Path(), help="Write the run's inputs as JSON.")
def infer(model_path, input_path, stream, history, manifest_path):
    """Predict contact force every 0.1 s; writes time,pred rows to stdout."""
    model = ModelParams.load(model_path)
    if stream:
        n_windows = _infer_stream(model, history)
    elif input_path is None:
        raise click.UsageError("--input is required unless --stream is given")
    else:
        n_windows = _infer_file(model, input_path)
    if manifest_path is not None:
        manifest = build_manifest(
            "infer",
            {"model": model.spec.as_dict(), "history": history},
            checkpoint=str(model_path),
            source="stdin" if stream else str(input_path),
            windows=n_windows,
        )
        write_manifest(manifest, manifest_path)


def _infer_file(model: ModelParams, input_path: str) -> int:
    series = read_series(input_path, INTERROGATOR_HEADER)
    click.echo("time,pred")
    try:
        resampled = resample_cubic(series, INTERROGATOR_HZ, origin=series.start)
    except TooFewSamples:
        resampled = None
    n_windows = 0 if resampled is None else len(resampled) // WINDOW_ROWS
    if n_windows == 0:
        logger.warning("input shorter than one %d-row window; no predictions", WINDOW_ROWS)
        return 0
    shifts = compute_shift(resampled, estimate_reference(series)).values[: n_windows * WINDOW_ROWS]
    preds = predict_episode(model, shifts.reshape(n_windows, WINDOW_ROWS, -1))
    for t, pred in zip(label_times(n_windows), preds):
        click.echo(f"{float(t)!r},{float(pred)!r}")
    return n_windows


def _infer_stream(model: ModelParams, history: int) -> int:
    """One window of buffered rows plus four raw samples of resampler look-behind."""
    stdin = click.get_text_stream("stdin")
    windower = StreamWindower()
    predictor = SequencePredictor(model, max_history=history)

    def emit(ready) -> None:
        for t, window in ready:
            click.echo(f"{t!r},{predictor.step(window)!r}")

    click.echo("time,pred")
    header = stdin.readline().strip()
    if header and header != ",".join(INTERROGATOR_HEADER):
        raise ParseError(f"expected header '{','.join(INTERROGATOR_HEADER)}', got '{header}'", 1)
    for n, line in enumerate(stdin, start=2):
        line = line.strip()
        if not line:
            continue
        try:
            cells = [float(c) for c in line.split(",")]
        except ValueError:
            raise ParseError(f"malformed number in '{line}'", n) from None
        if len(cells) != len(INTERROGATOR_HEADER):
            raise ParseError(f"expected {len(INTERROGATOR_HEADER)} fields, got {len(cells)}", n)
        emit(windower.push(cells[0], np.array(cells[1:])))
    emit(windower.flush())
    if windower.windows_emitted == 0:
        logger.warning("stream ended before one full window; no predictions")
    return windower.windows_emitted
