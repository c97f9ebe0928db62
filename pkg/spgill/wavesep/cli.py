"""
Command line interface of `spgill.wavesep`.

    wavesep train --config desk.txt
    wavesep separate --checkpoint runs/desk/model.ckpt --input mix.wav \
        --outdir separated
    wavesep diagnose --layer all
    wavesep params --variants
    wavesep evaluate --checkpoint runs/desk/model.ckpt --manifest m.tsv
    wavesep synth --config desk.txt --outdir data
    wavesep gradcheck

Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
every other failure.
"""

### stdlib imports
import csv
import datetime
import functools
import logging
import math
import pathlib
import sys
import typing

### vendor imports
import click
import rich.console
import rich.logging
import rich.table

### local imports
from . import evaluation, gradcheck, training
from .config import RunConfig
from .data import (
    DatasetSplits,
    generate_synth,
    load_manifest,
    read_wav,
    split_synth,
    write_dataset,
    write_wav,
)
from .errors import (
    ConfigurationError,
    DatasetError,
    InvalidArgumentError,
    WavesepError,
)
from .model import (
    REFERENCE_VARIANTS,
    ModelConfig,
    build_model,
    count_params,
    layer_breakdown,
)
from .resampling import ResamplerKind, get_resampler


log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOSS_CURVES_NAME = "loss_curves.csv"

# Short layer names accepted by `diagnose --layer`
LAYER_ALIASES: dict[str, ResamplerKind] = {
    "haar": ResamplerKind.DWT_HAAR,
    "lazy": ResamplerKind.DWT_LAZY,
    "decimate": ResamplerKind.DECIMATE_LINEAR,
    "avgpool": ResamplerKind.AVGPOOL_LINEAR,
}


def _stdout() -> rich.console.Console:
    return rich.console.Console()


def _stderr() -> rich.console.Console:
    return rich.console.Console(stderr=True)


def print_error(message: str) -> None:
    """Print an error in red on stderr."""
    _stderr().print(
        message, style="red", markup=False, highlight=False, soft_wrap=True
    )


def handle_errors(func):
    """
    Turn package errors into a red message and an exit code: 2 for
    configuration and argument errors, 1 for everything else.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigurationError, InvalidArgumentError) as exc:
            log.debug("Command failed", exc_info=True)
            print_error(f"Error: {exc}")
            sys.exit(2)
        except WavesepError as exc:
            log.debug("Command failed", exc_info=True)
            print_error(f"Error: {exc}")
            sys.exit(1)

    return wrapper


def _load_run_config(
    config: typing.Optional[pathlib.Path],
    overrides: tuple[str, ...],
    outdir: typing.Optional[pathlib.Path] = None,
) -> RunConfig:
    if outdir is not None:
        overrides = overrides + (f"output_dir={outdir}",)
    run = RunConfig.load(config, overrides)
    run.validate()
    return run


def _load_splits(run: RunConfig) -> DatasetSplits:
    """Dataset selected by the run config, checked against its model."""
    if run.manifest is not None:
        splits = load_manifest(run.manifest)
    else:
        spec = run.synth_spec()
        splits = split_synth(spec, generate_synth(spec))

    model_cfg = run.model_config()
    for split, tracks in splits.items():
        for track in tracks:
            if track.num_sources != model_cfg.num_sources:
                raise ConfigurationError(
                    f"Track '{track.name}' ({split}) has "
                    f"{track.num_sources} sources but model.num_sources is "
                    f"{model_cfg.num_sources}"
                )
            if track.channels != model_cfg.input_channels:
                raise ConfigurationError(
                    f"Track '{track.name}' ({split}) has {track.channels} "
                    "channels but model.input_channels is "
                    f"{model_cfg.input_channels}"
                )
    return splits


def _session_log(directory: pathlib.Path) -> logging.Handler:
    """Attach a log file for this session under `directory / "logs"`."""
    opened = datetime.datetime.now().strftime("%Y%m%dT%H%M%S")
    path = directory / "logs" / f"{opened}.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    logging.getLogger().addHandler(handler)
    return handler


def _write_rows(
    path: pathlib.Path,
    header: list[str],
    rows: typing.Iterable[list[typing.Any]],
) -> None:
    with pathlib.Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


_config_option = click.option(
    "--config",
    "config",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    help="Run config file (key = value lines).",
)
_set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override one config key; may be repeated.",
)
_checkpoint_option = click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    required=True,
    help="Checkpoint written by `wavesep train`.",
)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log debug messages.")
def cli(verbose: bool) -> None:
    """Audio source separation with wavelet down/up-sampling layers."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[rich.logging.RichHandler(console=_stderr())],
        force=True,
    )


@cli.command("train")
@_config_option
@_set_option
@click.option(
    "--outdir",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    help="Shortcut for --set output_dir=DIR.",
)
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    help="Continue training from this checkpoint.",
)
@handle_errors
def cmd_train(
    config: typing.Optional[pathlib.Path],
    overrides: tuple[str, ...],
    outdir: typing.Optional[pathlib.Path],
    resume: typing.Optional[pathlib.Path],
) -> None:
    """Train a model and write checkpoint, loss curves and config."""
    run = _load_run_config(config, overrides, outdir)
    directory = run.output_dir
    run.write_resolved(directory)
    handler = _session_log(directory)

    try:
        splits = _load_splits(run)
        model_cfg = run.model_config()
        train_cfg = run.train_config()
        model = build_model(model_cfg, seed=train_cfg.seed)
        log.info(
            "Training %s model with %d parameters on %d tracks",
            model_cfg.resampler_kind.value,
            model.num_params,
            len(splits.train),
        )
        result = training.train(
            model,
            splits.train,
            splits.validation,
            train_cfg,
            resume=training.load_checkpoint(resume) if resume else None,
        )
        training.save_checkpoint(
            directory / CHECKPOINT_NAME, result.checkpoint
        )
        training.write_loss_curves(directory / LOSS_CURVES_NAME, result.curve)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

    best = result.checkpoint
    _stdout().print(
        f"Best validation loss {best.best_val_loss:.6g} "
        f"({best.phase} epoch {best.epoch}); artifacts in {directory}"
    )
    if result.diverged:
        print_error("Training diverged; kept the last good checkpoint")
        sys.exit(1)


@cli.command("separate")
@_checkpoint_option
@click.option(
    "--input",
    "input_path",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    required=True,
    help="Mixture WAV file.",
)
@click.option(
    "--outdir",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    required=True,
    help="Directory for source_1.wav ... source_N.wav.",
)
@handle_errors
def cmd_separate(
    checkpoint: pathlib.Path, input_path: pathlib.Path, outdir: pathlib.Path
) -> None:
    """Separate a mixture WAV file into its sources."""
    state = training.load_checkpoint(checkpoint)
    model = state.to_model()
    mixture, sample_rate = read_wav(input_path)
    if mixture.shape[-1] != model.cfg.input_channels:
        raise InvalidArgumentError(
            f"'{input_path}' has {mixture.shape[-1]} channels, the model "
            f"expects {model.cfg.input_channels}"
        )

    separation = evaluation.separate(
        model, mixture, state.train_config.segment_len
    )
    outdir.mkdir(parents=True, exist_ok=True)
    for index, estimate in enumerate(separation.estimates, start=1):
        write_wav(outdir / f"source_{index}.wav", estimate, sample_rate)

    _stdout().print(
        f"Wrote {len(separation.estimates)} sources covering samples "
        f"{separation.offset}..{separation.offset + separation.length} of "
        f"{mixture.shape[0]} to {outdir}"
    )


@cli.command("diagnose")
@click.option(
    "--layer",
    type=click.Choice(
        ["all", *LAYER_ALIASES, *(kind.value for kind in ResamplerKind)]
    ),
    default="all",
    show_default=True,
    help="Resampling pair to measure.",
)
@click.option(
    "--probe",
    type=float,
    default=evaluation.DEFAULT_PROBE_FREQ,
    show_default=True,
    help="Aliasing probe frequency in radians per sample.",
)
@click.option(
    "--length",
    type=int,
    default=evaluation.DEFAULT_DIAGNOSTIC_LEN,
    show_default=True,
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--output",
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    default="diagnostics.csv",
    show_default=True,
    help="Diagnostics CSV to write.",
)
@handle_errors
def cmd_diagnose(
    layer: str,
    probe: float,
    length: int,
    seed: int,
    output: pathlib.Path,
) -> None:
    """Measure reconstruction, aliasing and shift sensitivity."""
    if layer == "all":
        kinds = list(ResamplerKind)
    else:
        kinds = [LAYER_ALIASES.get(layer) or ResamplerKind(layer)]

    rows = []
    for kind in kinds:
        diagnostics = evaluation.layer_diagnostics(kind, probe, length, seed)
        rows.append((kind.value, diagnostics))

    table = rich.table.Table(title=f"Resampling layers at probe {probe:.4f}")
    for column in (
        "layer",
        "anti-aliasing",
        "perfect recon.",
        "recon_err",
        "dc_gain",
        "alias_ratio",
        "shift_sens",
    ):
        table.add_column(
            column, justify="left" if column == "layer" else "right"
        )
    for name, diagnostics in rows:
        resampler = get_resampler(name)
        table.add_row(
            name,
            "yes" if resampler.anti_aliasing else "no",
            "yes" if resampler.perfect_reconstruction else "no",
            f"{diagnostics.reconstruction_max_abs_error:.3g}",
            f"{diagnostics.passband_dc_gain:.4f}",
            f"{diagnostics.aliasing_energy_ratio:.4f}",
            f"{diagnostics.shift_sensitivity:.4f}",
        )
    _stdout().print(table)
    evaluation.write_diagnostics_csv(output, rows)


@cli.command("params")
@_config_option
@_set_option
@click.option(
    "--variants",
    is_flag=True,
    help="Compare every reference variant with its reported count.",
)
@click.option(
    "--output",
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    default="params.csv",
    show_default=True,
    help="CSV copy of the table.",
)
@handle_errors
def cmd_params(
    config: typing.Optional[pathlib.Path],
    overrides: tuple[str, ...],
    variants: bool,
    output: pathlib.Path,
) -> None:
    """Count trainable parameters."""
    console = _stdout()

    if variants:
        header = [
            "variant",
            "resampler",
            "encoder_growth",
            "params",
            "reported",
            "deviation",
        ]
        rows = []
        for name, variant in REFERENCE_VARIANTS.items():
            computed = count_params(variant.config)
            rows.append(
                [
                    name,
                    variant.config.resampler_kind.value,
                    variant.config.encoder_growth,
                    computed,
                    int(variant.reported_params),
                    computed / variant.reported_params - 1.0,
                ]
            )
        table = rich.table.Table(title="Reference variants")
        for column in header:
            table.add_column(column, justify="right")
        for row in rows:
            table.add_row(
                *(str(cell) for cell in row[:3]),
                f"{row[3]:,}",
                f"{row[4] / 1e6:.2f}M",
                f"{row[5]:+.2%}",
            )
        console.print(table)
    else:
        model_cfg: ModelConfig = _load_run_config(
            config, overrides
        ).model_config()
        header = ["layer", "in_channels", "out_channels", "kernel", "params"]
        rows = [
            [spec.name, *spec[1:], spec.params]
            for spec in layer_breakdown(model_cfg)
        ]
        table = rich.table.Table(
            title=f"{model_cfg.resampler_kind.value} model, "
            f"{model_cfg.levels} levels"
        )
        for column in header:
            table.add_column(column, justify="right")
        for row in rows:
            table.add_row(
                *(
                    f"{cell:,}" if isinstance(cell, int) else cell
                    for cell in row
                )
            )
        total = count_params(model_cfg)
        table.add_row("total", "", "", "", f"{total:,}", style="bold")
        rows.append(["total", "", "", "", total])
        console.print(table)

    _write_rows(output, header, rows)


@cli.command("evaluate")
@_checkpoint_option
@click.option(
    "--manifest",
    type=click.Path(exists=True, dir_okay=False, path_type=pathlib.Path),
    required=True,
)
@click.option(
    "--split",
    type=click.Choice(["train", "validation", "test"]),
    default="test",
    show_default=True,
)
@click.option(
    "--frame-len",
    type=click.IntRange(min=1),
    help="SDR frame length in samples [default: one second].",
)
@click.option(
    "--output",
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    default="metrics.csv",
    show_default=True,
)
@handle_errors
def cmd_evaluate(
    checkpoint: pathlib.Path,
    manifest: pathlib.Path,
    split: str,
    frame_len: typing.Optional[int],
    output: pathlib.Path,
) -> None:
    """Score a checkpoint with frame-wise SDR."""
    state = training.load_checkpoint(checkpoint)
    model = state.to_model()
    tracks = getattr(load_manifest(manifest), split)
    if not tracks:
        raise DatasetError(f"The {split} split of '{manifest}' is empty")

    report = evaluation.evaluate_model(
        model, tracks, state.train_config.segment_len, frame_len
    )
    if not report.aggregate:
        raise DatasetError("No track could be evaluated")
    evaluation.write_metrics_csv(output, report)

    table = rich.table.Table(title=f"SDR on {len(tracks)} {split} tracks")
    for column in ("source", "median SDR (dB)", "mean SDR (dB)", "frames"):
        table.add_column(column, justify="right")
    for source, metrics in report.aggregate.items():
        table.add_row(
            str(source),
            f"{metrics.median_sdr:.2f}",
            f"{metrics.mean_sdr:.2f}",
            str(metrics.frames),
        )
    _stdout().print(table)


@cli.command("synth")
@_config_option
@_set_option
@click.option(
    "--outdir",
    type=click.Path(file_okay=False, path_type=pathlib.Path),
    required=True,
    help="Directory for the WAV stems and manifest.tsv.",
)
@handle_errors
def cmd_synth(
    config: typing.Optional[pathlib.Path],
    overrides: tuple[str, ...],
    outdir: pathlib.Path,
) -> None:
    """Write the synthetic dataset as WAV files plus a manifest."""
    spec = _load_run_config(config, overrides).synth_spec()
    manifest = write_dataset(outdir, split_synth(spec, generate_synth(spec)))
    _stdout().print(f"Wrote {spec.num_tracks} tracks; manifest {manifest}")


@cli.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--tolerance",
    type=float,
    default=gradcheck.DEFAULT_TOLERANCE,
    show_default=True,
)
@handle_errors
def cmd_gradcheck(seed: int, tolerance: float) -> None:
    """Check model gradients against finite differences."""
    errors = gradcheck.check_model_gradients(seed=seed)

    table = rich.table.Table(title="Relative gradient error, tiny model")
    table.add_column("layer")
    table.add_column("relative error", justify="right")
    for name, error in errors.items():
        table.add_row(name, f"{error:.3g}")
    console = _stdout()
    console.print(table)

    worst = max(errors.values())
    if not worst < tolerance or math.isnan(worst):
        print_error(f"Worst relative error {worst:.3g} exceeds {tolerance:g}")
        sys.exit(1)
    console.print(f"Worst relative error {worst:.3g}")
