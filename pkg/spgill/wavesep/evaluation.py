"""
Separation metrics and resampling-layer diagnostics.

SDR is measured per non-overlapping frame, `10 log10(sum ref^2 / sum
(ref - est)^2)`, skipping frames whose reference is silent, and summarised
by median and mean. Layer diagnostics measure, for any resampler pair,
whether it reconstructs its input, how much of a high-frequency tone
aliases into its retained band, and how much its output moves when the
input shifts by one sample.
"""

### stdlib imports
import csv
import dataclasses
import logging
import math
import pathlib
import typing

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .core import FeatureMap, as_feature_map
from .data import Track
from .errors import InvalidArgumentError, MetricError
from .model import Model, fit_lengths, output_length
from .resampling import Resampler, ResamplerKind, get_resampler


log = logging.getLogger(__name__)

# Reference energy below which a frame counts as silent
SILENCE_THRESHOLD = 1e-12

# Upper clamp for frame SDRs, perfect frames included
SDR_CLAMP_DB = 60.0

# Probe frequency (radians per sample) of the aliasing measurement
DEFAULT_PROBE_FREQ = 3.0 * math.pi / 4.0

DEFAULT_DIAGNOSTIC_LEN = 4096

# Label of the aggregate rows in metric tables
AGGREGATE_TRACK = "ALL"


@dataclasses.dataclass(frozen=True)
class SeparationMetrics:
    """Frame-wise SDR summary of one estimate against its reference."""

    median_sdr: float
    mean_sdr: float
    frames: int
    skipped: int


def frame_sdrs(
    est: FeatureMap, ref: FeatureMap, frame_len: int
) -> tuple[npt.NDArray[np.float64], int]:
    """
    SDR in dB of every active frame, and the number of silent frames.

    A trailing partial frame is evaluated like any other.
    """
    est = as_feature_map(est, "estimate")
    ref = as_feature_map(ref, "reference")
    if est.shape != ref.shape:
        raise InvalidArgumentError(
            f"Estimate shape {est.shape} differs from reference {ref.shape}"
        )
    if frame_len < 1:
        raise InvalidArgumentError(f"frame_len must be >= 1, got {frame_len}")

    # Energies per time step, summed over channels, then per frame
    starts = np.arange(0, ref.shape[-2], frame_len)
    ref_energy = np.add.reduceat(np.sum(ref * ref, axis=-1), starts)
    error = ref - est
    error_energy = np.add.reduceat(np.sum(error * error, axis=-1), starts)

    active = ref_energy >= SILENCE_THRESHOLD
    with np.errstate(divide="ignore"):
        sdrs = 10.0 * np.log10(ref_energy[active] / error_energy[active])
    return np.minimum(sdrs, SDR_CLAMP_DB), int(np.count_nonzero(~active))


def sdr_frames(
    est: FeatureMap, ref: FeatureMap, frame_len: int
) -> SeparationMetrics:
    """Median and mean frame-wise SDR; see `frame_sdrs`."""
    sdrs, skipped = frame_sdrs(est, ref, frame_len)
    if sdrs.size == 0:
        raise MetricError(
            f"no active frames: all {skipped} frames of the reference are "
            "silent"
        )
    return SeparationMetrics(
        median_sdr=float(np.median(sdrs)),
        mean_sdr=float(np.mean(sdrs)),
        frames=int(sdrs.size),
        skipped=skipped,
    )


#
# Layer diagnostics
#


@dataclasses.dataclass(frozen=True)
class LayerDiagnostics:
    reconstruction_max_abs_error: float
    passband_dc_gain: float
    aliasing_energy_ratio: float
    shift_sensitivity: float


def aliased_frequency(freq: float) -> float:
    """Where a tone at `freq` lands after halving the sample rate."""
    folded = math.fmod(2.0 * freq, 2.0 * math.pi)
    return 2.0 * math.pi - folded if folded > math.pi else folded


def tone_amplitude(signal: npt.NDArray[np.float64], freq: float) -> float:
    """Amplitude of the sinusoid at `freq` in `signal` (Hann-windowed)."""
    window = np.hanning(signal.size)
    phasor = np.exp(-1j * freq * np.arange(signal.size))
    magnitude = abs(np.sum(window * signal * phasor)) / np.sum(window)
    # DC and Nyquist have no mirrored negative-frequency half
    at_edge = math.isclose(freq, 0.0, abs_tol=1e-12) or math.isclose(
        freq, math.pi
    )
    return magnitude if at_edge else 2.0 * magnitude


def layer_diagnostics(
    resampler: typing.Union[Resampler, ResamplerKind, str],
    probe_freq: float = DEFAULT_PROBE_FREQ,
    time_len: int = DEFAULT_DIAGNOSTIC_LEN,
    seed: int = 0,
    channels: int = 4,
) -> LayerDiagnostics:
    """
    Measure the reconstruction, anti-aliasing and shift behaviour of a
    down/up-sampling pair.

    The aliasing ratio is the squared amplitude that a unit tone at
    `probe_freq` leaves at its aliased frequency in the retained band,
    normalised by the band's DC gain. Shift sensitivity compares the
    retained band of a random map with that of the same map shifted by one
    sample; it is comparative only, even an ideal filter scores above 0.
    """
    if not isinstance(resampler, Resampler):
        resampler = get_resampler(resampler)
    if not 0.0 < probe_freq < math.pi:
        raise InvalidArgumentError(
            f"probe_freq must lie in (0, pi), got {probe_freq}"
        )
    if time_len < 256 or time_len % 2:
        raise InvalidArgumentError(
            f"time_len must be even and >= 256, got {time_len}"
        )

    rng = np.random.default_rng(seed)
    down = resampler.downsample
    up = resampler.upsample

    # Reconstruction over the samples the up-sampler emits
    z = rng.standard_normal((time_len, channels))
    rebuilt = up(down(z))
    overlap = min(rebuilt.shape[0], time_len)
    recon_error = float(np.max(np.abs(rebuilt[:overlap] - z[:overlap])))

    dc_gain = float(
        np.mean(resampler.retained_band(down(np.ones((time_len, 1)))))
    )

    tone = np.cos(probe_freq * np.arange(time_len))[:, np.newaxis]
    band = resampler.retained_band(down(tone))[:, 0]
    alias_amplitude = tone_amplitude(band, aliased_frequency(probe_freq))
    alias_ratio = (alias_amplitude / dc_gain) ** 2

    extended = rng.standard_normal((time_len + 1, channels))
    base = resampler.retained_band(down(extended[:-1]))
    shifted = resampler.retained_band(down(extended[1:]))
    shift_sensitivity = float(
        np.linalg.norm(shifted - base) / np.linalg.norm(base)
    )

    return LayerDiagnostics(
        reconstruction_max_abs_error=recon_error,
        passband_dc_gain=abs(dc_gain),
        aliasing_energy_ratio=float(alias_ratio),
        shift_sensitivity=shift_sensitivity,
    )


def write_diagnostics_csv(
    path: pathlib.Path, rows: typing.Iterable[tuple[str, LayerDiagnostics]]
) -> None:
    with pathlib.Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["layer", "recon_err", "dc_gain", "alias_ratio", "shift_sens"]
        )
        for layer, diagnostics in rows:
            writer.writerow(
                [
                    layer,
                    repr(diagnostics.reconstruction_max_abs_error),
                    repr(diagnostics.passband_dc_gain),
                    repr(diagnostics.aliasing_energy_ratio),
                    repr(diagnostics.shift_sensitivity),
                ]
            )


#
# Whole-track separation
#


@dataclasses.dataclass
class Separation:
    """
    Stitched model outputs for one mixture.

    `estimates[n]` covers mixture samples `offset .. offset + length`.
    """

    estimates: list[FeatureMap]
    offset: int
    window_input_len: int
    window_output_len: int

    @property
    def length(self) -> int:
        return self.estimates[0].shape[0]


def window_lengths(
    model: Model, available_len: int, preferred_input_len: int
) -> typing.Optional[tuple[int, int]]:
    """
    Window `(input_len, output_len)` for a mixture of `available_len`
    samples: the preferred input length if it fits, else the longest
    admissible one that does. None if the mixture is too short.
    """
    minimum, _ = fit_lengths(model.cfg, 1)
    input_len = min(preferred_input_len, available_len)
    while input_len >= minimum:
        output_len = output_length(model.cfg, input_len)
        if output_len is not None:
            return input_len, output_len
        input_len -= 1
    return None


def separate(
    model: Model,
    mixture: npt.ArrayLike,
    input_len: int,
    batch_size: int = 8,
) -> Separation:
    """
    Run the model over consecutive windows of `mixture`.

    Windows of `input_len` samples advance by the model output length, so
    the outputs tile the covered region without gaps or overlaps. The
    mixture is not padded; samples closer to the edges than the model's
    context are not covered.
    """
    mixture = as_feature_map(mixture, "mixture")
    lengths = window_lengths(model, mixture.shape[0], input_len)
    if lengths is None:
        minimum, _ = fit_lengths(model.cfg, 1)
        raise InvalidArgumentError(
            f"Mixture of {mixture.shape[0]} samples is shorter than the "
            f"minimum model input length {minimum}"
        )
    input_len, output_len = lengths

    window_count = (mixture.shape[0] - input_len) // output_len + 1
    starts = np.arange(window_count) * output_len
    outputs: list[list[FeatureMap]] = [
        [] for _ in range(model.cfg.num_sources)
    ]
    for first in range(0, window_count, batch_size):
        windows = np.stack(
            [
                mixture[start : start + input_len]
                for start in starts[first : first + batch_size]
            ]
        )
        estimates, _ = model.forward(windows)
        for collected, estimate in zip(outputs, estimates):
            collected.extend(estimate)

    return Separation(
        estimates=[np.concatenate(parts, axis=0) for parts in outputs],
        offset=(input_len - output_len) // 2,
        window_input_len=input_len,
        window_output_len=output_len,
    )


@dataclasses.dataclass(frozen=True)
class TrackMetrics:
    track: str
    source: int
    metrics: SeparationMetrics


@dataclasses.dataclass
class EvaluationReport:
    """Per-track metrics plus per-source aggregates over all tracks."""

    tracks: list[TrackMetrics]
    aggregate: dict[int, SeparationMetrics]


def evaluate_model(
    model: Model,
    tracks: list[Track],
    input_len: int,
    frame_len: typing.Optional[int] = None,
) -> EvaluationReport:
    """
    Separate every track and score each source estimate.

    `frame_len` defaults to one second at each track's sample rate. The
    aggregate of a source is the median of the track medians and the mean
    of the track means. Tracks too short for the model are skipped with a
    warning.
    """
    if not tracks:
        raise InvalidArgumentError("evaluate_model needs at least one track")

    rows: list[TrackMetrics] = []
    for track in tracks:
        try:
            separation = separate(model, track.mixture, input_len)
        except InvalidArgumentError as exc:
            log.warning("Skipping track '%s': %s", track.name, exc)
            continue

        stop = separation.offset + separation.length
        for index, estimate in enumerate(separation.estimates):
            reference = track.sources[index][separation.offset : stop]
            try:
                metrics = sdr_frames(
                    estimate, reference, frame_len or track.sample_rate
                )
            except MetricError as exc:
                log.warning(
                    "Skipping source %d of track '%s': %s",
                    index + 1,
                    track.name,
                    exc,
                )
                continue
            rows.append(TrackMetrics(track.name, index + 1, metrics))

    aggregate: dict[int, SeparationMetrics] = {}
    for source in range(1, model.cfg.num_sources + 1):
        scored = [row.metrics for row in rows if row.source == source]
        if not scored:
            continue
        aggregate[source] = SeparationMetrics(
            median_sdr=float(np.median([m.median_sdr for m in scored])),
            mean_sdr=float(np.mean([m.mean_sdr for m in scored])),
            frames=sum(m.frames for m in scored),
            skipped=sum(m.skipped for m in scored),
        )

    return EvaluationReport(rows, aggregate)


def write_metrics_csv(path: pathlib.Path, report: EvaluationReport) -> None:
    """Write `track,source,median_sdr_db,mean_sdr_db,frames,skipped` rows."""
    rows = [(row.track, row.source, row.metrics) for row in report.tracks]
    rows += [
        (AGGREGATE_TRACK, source, metrics)
        for source, metrics in report.aggregate.items()
    ]
    with pathlib.Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            [
                "track",
                "source",
                "median_sdr_db",
                "mean_sdr_db",
                "frames",
                "skipped",
            ]
        )
        for track, source, metrics in rows:
            writer.writerow(
                [
                    track,
                    source,
                    repr(metrics.median_sdr),
                    repr(metrics.mean_sdr),
                    metrics.frames,
                    metrics.skipped,
                ]
            )
