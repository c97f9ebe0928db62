"""
Audio data: PCM16 WAV files, dataset manifests and a synthetic dataset.

A manifest is a UTF-8 text file with one track per line, tab separated:

    split<TAB>track_name<TAB>mixture_path<TAB>source1_path<TAB>...

`split` is one of `train`, `validation` or `test`. Relative paths are
resolved against the manifest's directory. Blank lines and lines starting
with `#` are ignored.
"""

### stdlib imports
import dataclasses
import logging
import math
import pathlib
import typing
import wave

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .core import FeatureMap, as_feature_map
from .errors import ConfigurationError, DatasetError, WavFormatError


log = logging.getLogger(__name__)

# PCM16 full scale
PCM_SCALE = 32768.0

SPLIT_NAMES = ("train", "validation", "test")


def mix_sources(sources: typing.Sequence[FeatureMap]) -> FeatureMap:
    """Sum sources in order. Always used to build mixtures."""
    mixture = np.array(sources[0], dtype=np.float64)
    for source in sources[1:]:
        mixture = mixture + source
    return mixture


@dataclasses.dataclass
class Track:
    """One song: its mixture and the N source stems, all `(T, C)`."""

    name: str
    sources: list[FeatureMap]
    mixture: FeatureMap
    sample_rate: int

    def __post_init__(self) -> None:
        if not self.sources:
            raise DatasetError(f"Track '{self.name}' has no sources")
        for index, source in enumerate(self.sources):
            if source.shape != self.mixture.shape:
                raise DatasetError(
                    f"Track '{self.name}': source {index + 1} has shape "
                    f"{source.shape}, mixture has {self.mixture.shape}"
                )

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def time_len(self) -> int:
        return self.mixture.shape[0]

    @property
    def channels(self) -> int:
        return self.mixture.shape[1]

    def additivity_error(self) -> float:
        """Largest `|mixture - sum(sources)|` over all samples."""
        return float(np.max(np.abs(self.mixture - mix_sources(self.sources))))


@dataclasses.dataclass
class DatasetSplits:
    train: list[Track] = dataclasses.field(default_factory=list)
    validation: list[Track] = dataclasses.field(default_factory=list)
    test: list[Track] = dataclasses.field(default_factory=list)

    def items(self) -> typing.Iterator[tuple[str, list[Track]]]:
        for split in SPLIT_NAMES:
            yield split, getattr(self, split)


#
# WAV I/O
#


def read_wav(path: pathlib.Path) -> tuple[FeatureMap, int]:
    """
    Read a PCM 16-bit WAV file.

    Returns a `(T, C)` map scaled to `[-1, 1)` and the sample rate.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise WavFormatError(f"'{path}' is not a valid file path")

    try:
        with wave.open(str(path), "rb") as handle:
            channels = handle.getnchannels()
            sample_width = handle.getsampwidth()
            sample_rate = handle.getframerate()
            frames = handle.readframes(handle.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(
            f"'{path}' is not a readable PCM WAV file: {exc}"
        ) from exc

    if sample_width != 2:
        raise WavFormatError(
            f"'{path}' uses {8 * sample_width}-bit samples; only 16-bit PCM "
            "is supported"
        )
    if channels not in (1, 2):
        raise WavFormatError(
            f"'{path}' has {channels} channels; only mono and stereo are "
            "supported"
        )
    if len(frames) % (2 * channels):
        raise WavFormatError(f"'{path}' has a truncated data chunk")

    samples = np.frombuffer(frames, dtype="<i2").reshape(-1, channels)
    return samples.astype(np.float64) / PCM_SCALE, sample_rate


def write_wav(
    path: pathlib.Path, signal: npt.ArrayLike, sample_rate: int
) -> None:
    """
    Write a `(T, C)` map as PCM 16-bit WAV.

    Samples are rounded to the nearest step and clamped to the PCM range.
    """
    signal = as_feature_map(signal, "WAV signal")
    if signal.ndim != 2 or signal.shape[1] not in (1, 2):
        raise WavFormatError(
            f"Only mono or stereo (T, C) signals can be written, got shape "
            f"{signal.shape}"
        )

    quantized = np.clip(
        np.round(signal * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1
    ).astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(signal.shape[1])
        handle.setsampwidth(2)
        handle.setframerate(int(sample_rate))
        handle.writeframes(quantized.tobytes())


#
# Manifests
#


def _load_track(
    name: str,
    mixture_path: pathlib.Path,
    source_paths: list[pathlib.Path],
) -> Track:
    for stem_path in [mixture_path, *source_paths]:
        if not stem_path.is_file():
            raise DatasetError(
                f"Track '{name}': '{stem_path}' does not exist"
            )
    mixture, sample_rate = read_wav(mixture_path)
    sources = []
    for source_path in source_paths:
        source, source_rate = read_wav(source_path)
        if source_rate != sample_rate:
            raise DatasetError(
                f"Track '{name}': '{source_path}' is at {source_rate} Hz, "
                f"the mixture at {sample_rate} Hz"
            )
        sources.append(source)
    track = Track(name, sources, mixture, sample_rate)

    # Each stem carries up to half a quantization step of error
    tolerance = (track.num_sources + 1) / PCM_SCALE
    if (error := track.additivity_error()) > tolerance:
        raise DatasetError(
            f"Track '{name}': mixture differs from the sum of its sources by "
            f"{error:.3g} (tolerance {tolerance:.3g})"
        )
    return track


def load_manifest(path: pathlib.Path) -> DatasetSplits:
    """Load every track listed in a manifest into train/validation/test."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise DatasetError(f"Manifest '{path}' does not exist")

    splits = DatasetSplits()
    seen_names: set[str] = set()
    num_sources: typing.Optional[int] = None
    sample_rate: typing.Optional[int] = None

    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue

            fields = line.split("\t")
            if len(fields) < 4:
                raise DatasetError(
                    f"{path}:{line_number}: expected split, track name, "
                    f"mixture and at least one source, got {len(fields)} "
                    "fields"
                )
            split, name, mixture_field, *source_fields = fields
            if split not in SPLIT_NAMES:
                raise DatasetError(
                    f"{path}:{line_number}: unknown split '{split}', expected "
                    f"one of {', '.join(SPLIT_NAMES)}"
                )
            if name in seen_names:
                raise DatasetError(
                    f"{path}:{line_number}: duplicate track name '{name}'"
                )
            seen_names.add(name)
            if num_sources is None:
                num_sources = len(source_fields)
            elif len(source_fields) != num_sources:
                raise DatasetError(
                    f"{path}:{line_number}: track '{name}' lists "
                    f"{len(source_fields)} sources, earlier tracks list "
                    f"{num_sources}"
                )

            track = _load_track(
                name,
                path.parent / mixture_field,
                [path.parent / field for field in source_fields],
            )
            if sample_rate is None:
                sample_rate = track.sample_rate
            elif track.sample_rate != sample_rate:
                raise DatasetError(
                    f"{path}:{line_number}: track '{name}' is at "
                    f"{track.sample_rate} Hz, earlier tracks at "
                    f"{sample_rate} Hz"
                )
            getattr(splits, split).append(track)

    log.info(
        "Loaded manifest '%s': %s",
        path,
        ", ".join(
            f"{len(tracks)} {split}" for split, tracks in splits.items()
        ),
    )
    return splits


def write_dataset(
    directory: pathlib.Path, splits: DatasetSplits
) -> pathlib.Path:
    """
    Write every track as WAV stems plus a `manifest.tsv` under `directory`.

    Returns the manifest path.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []

    for split, tracks in splits.items():
        for track in tracks:
            track_dir = pathlib.Path(split) / track.name
            (directory / track_dir).mkdir(parents=True, exist_ok=True)

            mixture_path = track_dir / "mixture.wav"
            write_wav(
                directory / mixture_path, track.mixture, track.sample_rate
            )
            fields = [split, track.name, mixture_path.as_posix()]
            for index, source in enumerate(track.sources, start=1):
                source_path = track_dir / f"source_{index}.wav"
                write_wav(directory / source_path, source, track.sample_rate)
                fields.append(source_path.as_posix())
            lines.append("\t".join(fields))

    manifest_path = directory / "manifest.tsv"
    manifest_path.write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    return manifest_path


#
# Synthetic dataset
#

# Harmonic source recipe
TONE_F0_RANGE = (60.0, 400.0)
TONE_PARTIALS = 3
TONE_AMPLITUDE_RANGE = (0.05, 0.15)
ENVELOPE_KNOT_SECONDS = 0.5
ENVELOPE_RANGE = (0.2, 1.0)

# Noise source recipe
NOISE_PEAK = 0.3
NOISE_SMOOTHING_TAPS = 4


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """
    Recipe of the synthetic two-source dataset.

    Source 1 is a stack of three harmonics of a random fundamental under a
    slow random amplitude envelope; source 2 is uniform noise through a
    4-tap moving average.
    """

    num_tracks: int = 20
    duration_samples: int = 80000
    sample_rate: int = 8000
    seed: int = 0
    channels: int = 1
    validation_tracks: int = 4
    test_tracks: int = 0

    def __post_init__(self) -> None:
        for name in ("num_tracks", "duration_samples", "channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    f"synth.{name} must be >= 1, got {getattr(self, name)}"
                )
        if self.channels > 2:
            raise ConfigurationError(
                f"synth.channels must be 1 or 2, got {self.channels}"
            )
        # Highest partial must stay below Nyquist
        nyquist_floor = 2 * TONE_PARTIALS * TONE_F0_RANGE[1]
        if self.sample_rate <= nyquist_floor:
            raise ConfigurationError(
                f"synth.sample_rate must exceed {nyquist_floor:g} Hz, got "
                f"{self.sample_rate}"
            )
        if self.validation_tracks < 0 or self.test_tracks < 0:
            raise ConfigurationError(
                "synth.validation_tracks and synth.test_tracks must be >= 0"
            )
        if self.validation_tracks + self.test_tracks > self.num_tracks:
            raise ConfigurationError(
                f"synth.validation_tracks + synth.test_tracks "
                f"({self.validation_tracks + self.test_tracks}) exceeds "
                f"synth.num_tracks ({self.num_tracks})"
            )


def _harmonic_tone(
    rng: np.random.Generator, length: int, sample_rate: int
) -> npt.NDArray[np.float64]:
    time = np.arange(length) / sample_rate
    fundamental = rng.uniform(*TONE_F0_RANGE)
    amplitudes = rng.uniform(*TONE_AMPLITUDE_RANGE, size=TONE_PARTIALS)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=TONE_PARTIALS)

    knot_count = math.ceil(time[-1] / ENVELOPE_KNOT_SECONDS) + 2
    knot_times = np.arange(knot_count) * ENVELOPE_KNOT_SECONDS
    envelope = np.interp(
        time, knot_times, rng.uniform(*ENVELOPE_RANGE, size=knot_count)
    )

    tone = np.zeros(length)
    for partial in range(TONE_PARTIALS):
        tone += amplitudes[partial] * np.sin(
            2.0 * np.pi * (partial + 1) * fundamental * time + phases[partial]
        )
    return envelope * tone


def _smoothed_noise(
    rng: np.random.Generator, length: int
) -> npt.NDArray[np.float64]:
    noise = rng.uniform(
        -NOISE_PEAK, NOISE_PEAK, size=length + NOISE_SMOOTHING_TAPS - 1
    )
    kernel = np.full(NOISE_SMOOTHING_TAPS, 1.0 / NOISE_SMOOTHING_TAPS)
    return np.convolve(noise, kernel, mode="valid")


def generate_synth(spec: SynthSpec) -> list[Track]:
    """
    Generate `spec.num_tracks` deterministic two-source tracks.

    Track `i` depends only on `(spec.seed, i)`, never on how many tracks
    are generated around it.
    """
    tracks = []
    for index in range(spec.num_tracks):
        rng = np.random.default_rng([spec.seed, index])
        mono_sources = [
            _harmonic_tone(rng, spec.duration_samples, spec.sample_rate),
            _smoothed_noise(rng, spec.duration_samples),
        ]
        # Per-channel gains place each source somewhere in the stereo field
        sources = [
            source[:, np.newaxis]
            * rng.uniform(0.6, 1.0, size=spec.channels)
            if spec.channels > 1
            else source[:, np.newaxis]
            for source in mono_sources
        ]
        tracks.append(
            Track(
                name=f"synth_{index:03d}",
                sources=sources,
                mixture=mix_sources(sources),
                sample_rate=spec.sample_rate,
            )
        )
    return tracks


def split_synth(spec: SynthSpec, tracks: list[Track]) -> DatasetSplits:
    """Assign the first tracks to train, then validation, then test."""
    train_count = spec.num_tracks - spec.validation_tracks - spec.test_tracks
    validation_end = train_count + spec.validation_tracks
    return DatasetSplits(
        train=tracks[:train_count],
        validation=tracks[train_count:validation_end],
        test=tracks[validation_end:],
    )
