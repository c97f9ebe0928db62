"""
Training protocol: random gained segments, MSE, Adam and early stopping.

Training runs in two phases. The main phase trains until the validation
loss has not improved for `patience_epochs` epochs. The fine-tuning phase
restarts from the best weights with a lower learning rate and a larger
batch under the same stopping rule. The checkpoint with the lowest
validation loss seen anywhere is returned.
"""

### stdlib imports
import csv
import dataclasses
import itertools
import json
import logging
import math
import pathlib
import struct
import typing

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .core import FeatureMap, center_crop, mse_loss
from .data import Track, mix_sources
from .errors import (
    ConfigurationError,
    DatasetError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from .model import (
    Model,
    ModelConfig,
    count_params,
    fit_lengths,
    flatten_layers,
    output_length,
    unflatten_layers,
)


log = logging.getLogger(__name__)

PHASE_INIT = "init"
PHASE_MAIN = "main"
PHASE_FINE_TUNE = "finetune"

# RNG stream id of the validation crops, apart from every epoch stream
_VALIDATION_STREAM = 7919


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters. Defaults are the full-scale protocol.

    `epoch_batches` of 0 derives the epoch size from the data (see
    `batches_per_epoch`); `max_epochs` of 0 leaves each phase unbounded
    apart from early stopping.
    """

    segment_len: int = 147443
    batch_size: int = 16
    learning_rate: float = 1e-4
    fine_tune_lr: float = 1e-5
    fine_tune_batch: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience_epochs: int = 20
    gain_range: tuple[float, float] = (0.7, 1.0)
    seed: int = 0
    epoch_batches: int = 0
    max_epochs: int = 0
    val_crops_per_track: int = 4
    fine_tune: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "gain_range", tuple(float(g) for g in self.gain_range)
        )
        low, high = self.gain_range
        if not 0.0 < low <= high:
            raise ConfigurationError(
                f"train.gain_range needs 0 < low <= high, got {low}, {high}"
            )
        for name in (
            "segment_len",
            "batch_size",
            "fine_tune_batch",
            "patience_epochs",
            "val_crops_per_track",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(
                    f"train.{name} must be >= 1, got {getattr(self, name)}"
                )
        for name in ("epoch_batches", "max_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(
                    f"train.{name} must be >= 0, got {getattr(self, name)}"
                )
        for name in ("learning_rate", "fine_tune_lr", "epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(
                    f"train.{name} must be > 0, got {getattr(self, name)}"
                )
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigurationError(
                    f"train.{name} must lie in [0, 1), got "
                    f"{getattr(self, name)}"
                )

    def to_dict(self) -> dict[str, typing.Any]:
        values = dataclasses.asdict(self)
        values["gain_range"] = list(self.gain_range)
        return values

    @classmethod
    def from_dict(cls, values: dict[str, typing.Any]) -> "TrainConfig":
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(
                f"Unknown train config keys: {', '.join(unknown)}"
            )
        return cls(**values)


#
# Optimizer
#


@dataclasses.dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: npt.NDArray[np.float64]
    v: npt.NDArray[np.float64]
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(
    params: npt.NDArray[np.float64],
    grads: npt.NDArray[np.float64],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> tuple[npt.NDArray[np.float64], AdamState]:
    """
    One bias-corrected Adam update. Returns new params and a new state.

    Raises `NonFiniteGradientError` if any gradient is NaN or Inf.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ConfigurationError(
            f"Adam shapes disagree: params {params.shape}, grads "
            f"{grads.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise NonFiniteGradientError(
            f"{bad} of {grads.size} gradient entries are NaN or Inf at "
            f"Adam step {state.step + 1}"
        )

    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + epsilon)
    return new_params, AdamState(m, v, step)


#
# Checkpoints
#

CHECKPOINT_MAGIC = b"WAVESEP\x00"
CHECKPOINT_VERSION = 1
_HEADER_STRUCT = struct.Struct("<8sHI")


@dataclasses.dataclass
class Checkpoint:
    """
    Model weights, configs and optimizer state at one epoch.

    Weights and moments are stored as float32 in the layer order of
    `spgill.wavesep.model.layer_breakdown`.
    """

    model_config: ModelConfig
    train_config: TrainConfig
    weights: npt.NDArray[np.float32]
    adam_m: npt.NDArray[np.float32]
    adam_v: npt.NDArray[np.float32]
    adam_step: int
    phase: str
    epoch: int
    best_val_loss: float

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.adam_m = np.asarray(self.adam_m, dtype=np.float32)
        self.adam_v = np.asarray(self.adam_v, dtype=np.float32)
        expected = count_params(self.model_config)
        for name in ("weights", "adam_m", "adam_v"):
            shape = getattr(self, name).shape
            if shape != (expected,):
                raise ConfigurationError(
                    f"Checkpoint {name} has shape {shape}, the model config "
                    f"needs ({expected},)"
                )

    def to_model(self) -> Model:
        return Model(
            self.model_config,
            unflatten_layers(
                self.model_config, self.weights.astype(np.float64)
            ),
        )

    def adam_state(self) -> AdamState:
        return AdamState(
            self.adam_m.astype(np.float64),
            self.adam_v.astype(np.float64),
            self.adam_step,
        )


def save_checkpoint(path: pathlib.Path, checkpoint: Checkpoint) -> None:
    """
    Write a checkpoint file.

    Layout: magic, uint16 version, uint32 header length, a JSON header,
    then the float32 little-endian weights, first and second moments.
    """
    header = json.dumps(
        {
            "model_config": checkpoint.model_config.to_dict(),
            "train_config": checkpoint.train_config.to_dict(),
            "adam_step": checkpoint.adam_step,
            "phase": checkpoint.phase,
            "epoch": checkpoint.epoch,
            "best_val_loss": checkpoint.best_val_loss,
            "num_params": int(checkpoint.weights.size),
        },
        sort_keys=True,
        indent=2,
    ).encode("utf-8")

    with pathlib.Path(path).open("wb") as handle:
        handle.write(
            _HEADER_STRUCT.pack(
                CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)
            )
        )
        handle.write(header)
        arrays = (checkpoint.weights, checkpoint.adam_m, checkpoint.adam_v)
        for array in arrays:
            handle.write(array.astype("<f4").tobytes())


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`."""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Checkpoint '{path}' does not exist")
    payload = path.read_bytes()

    if len(payload) < _HEADER_STRUCT.size:
        raise ConfigurationError(f"'{path}' is too short to be a checkpoint")
    magic, version, header_len = _HEADER_STRUCT.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"'{path}' is not a wavesep checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"'{path}' has checkpoint version {version}, this package reads "
            f"version {CHECKPOINT_VERSION}"
        )

    offset = _HEADER_STRUCT.size
    header = json.loads(payload[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    num_params = header["num_params"]
    body = np.frombuffer(payload, dtype="<f4", offset=offset)
    if body.size != 3 * num_params:
        raise ConfigurationError(
            f"'{path}' holds {body.size} values, expected {3 * num_params}"
        )

    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        weights=body[:num_params].copy(),
        adam_m=body[num_params : 2 * num_params].copy(),
        adam_v=body[2 * num_params :].copy(),
        adam_step=header["adam_step"],
        phase=header["phase"],
        epoch=header["epoch"],
        best_val_loss=header["best_val_loss"],
    )


#
# Batches
#


def usable_tracks(tracks: list[Track], input_len: int) -> list[Track]:
    """Tracks long enough for one `input_len` crop; warns about the rest."""
    usable = []
    for track in tracks:
        if track.time_len < input_len:
            log.warning(
                "Skipping track '%s': %d samples, %d needed",
                track.name,
                track.time_len,
                input_len,
            )
            continue
        usable.append(track)
    return usable


def _crop_example(
    track: Track,
    start: int,
    gains: typing.Sequence[float],
    input_len: int,
    output_len: int,
) -> tuple[FeatureMap, list[FeatureMap]]:
    sources = [
        gain * source[start : start + input_len]
        for gain, source in zip(gains, track.sources)
    ]
    targets = [center_crop(source, output_len) for source in sources]
    return mix_sources(sources), targets


def _stack_examples(
    examples: list[tuple[FeatureMap, list[FeatureMap]]]
) -> tuple[FeatureMap, list[FeatureMap]]:
    mixtures = np.stack([mixture for mixture, _ in examples])
    num_sources = len(examples[0][1])
    targets = [
        np.stack([sources[n] for _, sources in examples])
        for n in range(num_sources)
    ]
    return mixtures, targets


def sample_batch(
    tracks: list[Track],
    cfg: TrainConfig,
    rng: np.random.Generator,
    input_len: int,
    output_len: int,
    batch_size: typing.Optional[int] = None,
) -> tuple[FeatureMap, list[FeatureMap]]:
    """
    Draw a training batch of random, randomly gained segments.

    Each example picks a track and a crop position uniformly, draws one
    gain per source from `cfg.gain_range` and rebuilds the mixture as the
    sum of the gained sources. Returns the mixtures `(B, input_len, C)`
    and N target arrays `(B, output_len, C)`.
    """
    tracks = usable_tracks(tracks, input_len)
    if not tracks:
        raise DatasetError(
            f"No training track has the {input_len} samples a segment needs"
        )

    examples = []
    for _ in range(batch_size or cfg.batch_size):
        track = tracks[rng.integers(len(tracks))]
        start = int(rng.integers(track.time_len - input_len + 1))
        gains = rng.uniform(*cfg.gain_range, size=track.num_sources)
        examples.append(
            _crop_example(track, start, gains, input_len, output_len)
        )
    return _stack_examples(examples)


def validation_crops(
    tracks: list[Track],
    cfg: TrainConfig,
    input_len: int,
    output_len: int,
) -> tuple[FeatureMap, list[FeatureMap]]:
    """
    Fixed validation segments, drawn once from `cfg.seed`, without gains.
    """
    tracks = usable_tracks(tracks, input_len)
    if not tracks:
        raise DatasetError(
            f"No validation track has the {input_len} samples a segment needs"
        )

    rng = np.random.default_rng([cfg.seed, _VALIDATION_STREAM])
    examples = []
    for track in tracks:
        for _ in range(cfg.val_crops_per_track):
            start = int(rng.integers(track.time_len - input_len + 1))
            examples.append(
                _crop_example(
                    track,
                    start,
                    [1.0] * track.num_sources,
                    input_len,
                    output_len,
                )
            )
    return _stack_examples(examples)


def validation_loss(
    model: Model,
    crops: tuple[FeatureMap, list[FeatureMap]],
    batch_size: int,
) -> float:
    """MSE over every element of the validation crops, in fixed order."""
    mixtures, targets = crops
    squared_error = 0.0
    elements = 0
    for start in range(0, mixtures.shape[0], batch_size):
        stop = start + batch_size
        outputs, _ = model.forward(mixtures[start:stop])
        diff = np.stack(outputs) - np.stack([t[start:stop] for t in targets])
        squared_error += float(np.sum(diff * diff))
        elements += diff.size
    return squared_error / elements


def batches_per_epoch(
    tracks: list[Track], cfg: TrainConfig, batch_size: int
) -> int:
    """
    `cfg.epoch_batches` if set, otherwise enough batches to see as many
    samples as the training tracks hold.
    """
    if cfg.epoch_batches:
        return cfg.epoch_batches
    total_samples = sum(track.time_len for track in tracks)
    return max(1, math.ceil(total_samples / (batch_size * cfg.segment_len)))


#
# Training loop
#


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[EpochRecord]
    diverged: bool = False


def resolve_segment(model_cfg: ModelConfig, cfg: TrainConfig) -> int:
    """Model output length for a `cfg.segment_len` input, or an error."""
    output_len = output_length(model_cfg, cfg.segment_len)
    if output_len is None:
        minimum, _ = fit_lengths(model_cfg, 1)
        raise ConfigurationError(
            f"train.segment_len {cfg.segment_len} is not an admissible model "
            f"input length; the minimum is {minimum}"
        )
    return output_len


class _Run:
    """Mutable state of one `train` call."""

    def __init__(
        self,
        model: Model,
        cfg: TrainConfig,
        train_tracks: list[Track],
        val_crops: tuple[FeatureMap, list[FeatureMap]],
        output_len: int,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.train_tracks = train_tracks
        self.val_crops = val_crops
        self.output_len = output_len
        self.params = model.flat_params()
        self.adam = AdamState.zeros(self.params.size)
        self.curve: list[EpochRecord] = []
        self.best: typing.Optional[Checkpoint] = None

    def snapshot(self, phase: str, epoch: int, val_loss: float) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.cfg,
            train_config=self.cfg,
            weights=self.params,
            adam_m=self.adam.m,
            adam_v=self.adam.v,
            adam_step=self.adam.step,
            phase=phase,
            epoch=epoch,
            best_val_loss=val_loss,
        )

    def restore(self, checkpoint: Checkpoint, keep_optimizer: bool) -> None:
        self.params = checkpoint.weights.astype(np.float64)
        self.model = self.model.with_flat_params(self.params)
        self.adam = (
            checkpoint.adam_state()
            if keep_optimizer
            else AdamState.zeros(self.params.size)
        )

    def record(
        self, phase: str, epoch: int, train_loss: float, val_loss: float
    ) -> None:
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(
                f"Validation loss is {val_loss} at epoch {epoch}", self.best
            )
        self.curve.append(EpochRecord(epoch, phase, train_loss, val_loss))
        if self.best is None or val_loss < self.best.best_val_loss:
            self.best = self.snapshot(phase, epoch, val_loss)

    def train_epoch(
        self, phase_index: int, epoch: int, lr: float, batch_size: int
    ) -> float:
        cfg = self.cfg
        input_len = cfg.segment_len
        rng = np.random.default_rng([cfg.seed, phase_index, epoch])
        losses = []

        for batch in range(
            batches_per_epoch(self.train_tracks, cfg, batch_size)
        ):
            mixtures, targets = sample_batch(
                self.train_tracks,
                cfg,
                rng,
                input_len,
                self.output_len,
                batch_size,
            )
            outputs, ctx = self.model.forward(mixtures)
            loss, grad = mse_loss(np.stack(outputs), np.stack(targets))
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"Training loss is {loss} at epoch {epoch}, batch "
                    f"{batch + 1}",
                    self.best,
                )
            grads = flatten_layers(self.model.backward(ctx, list(grad)))
            self.params, self.adam = adam_step(
                self.params,
                grads,
                self.adam,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.epsilon,
            )
            self.model = self.model.with_flat_params(self.params)
            losses.append(loss)
            log.debug("epoch %d batch %d loss %.6g", epoch, batch + 1, loss)

        return float(np.mean(losses))

    def run_phase(
        self,
        phase: str,
        phase_index: int,
        first_epoch: int,
        lr: float,
        batch_size: int,
        phase_best: float = math.inf,
    ) -> int:
        """Train one phase until early stopping; returns the last epoch."""
        cfg = self.cfg
        stale_epochs = 0
        epoch = first_epoch - 1
        log.info(
            "Starting %s phase at epoch %d (lr %g, batch %d)",
            phase,
            first_epoch,
            lr,
            batch_size,
        )

        for epoch in itertools.count(first_epoch):
            if cfg.max_epochs and epoch - first_epoch >= cfg.max_epochs:
                epoch -= 1
                break

            train_loss = self.train_epoch(phase_index, epoch, lr, batch_size)
            val_loss = validation_loss(self.model, self.val_crops, batch_size)
            self.record(phase, epoch, train_loss, val_loss)
            log.info(
                "%s epoch %d: train %.6g, validation %.6g",
                phase,
                epoch,
                train_loss,
                val_loss,
            )

            if val_loss < phase_best:
                phase_best = val_loss
                stale_epochs = 0
            else:
                stale_epochs += 1
            if stale_epochs >= cfg.patience_epochs:
                log.info(
                    "No improvement for %d epochs, stopping %s phase",
                    stale_epochs,
                    phase,
                )
                break

        return epoch


def train(
    model: Model,
    train_tracks: list[Track],
    validation_tracks: list[Track],
    cfg: TrainConfig,
    resume: typing.Optional[Checkpoint] = None,
) -> TrainResult:
    """
    Run the two-phase training protocol.

    With `resume`, training continues from that checkpoint's weights,
    optimizer state, phase and epoch instead of from `model`'s weights.
    Returns the best checkpoint and the per-epoch loss curve; if the loss
    diverges the result is flagged and holds the last good checkpoint.
    """
    if not train_tracks or not validation_tracks:
        raise DatasetError(
            "Training needs non-empty train and validation splits, got "
            f"{len(train_tracks)} and {len(validation_tracks)} tracks"
        )
    if resume is not None and resume.model_config != model.cfg:
        raise ConfigurationError(
            "The resume checkpoint was trained with a different model config"
        )

    output_len = resolve_segment(model.cfg, cfg)
    train_tracks = usable_tracks(train_tracks, cfg.segment_len)
    if not train_tracks:
        raise DatasetError(
            f"No training track holds {cfg.segment_len} samples"
        )
    val_crops = validation_crops(
        validation_tracks, cfg, cfg.segment_len, output_len
    )
    run = _Run(model, cfg, train_tracks, val_crops, output_len)

    phases = [(PHASE_MAIN, cfg.learning_rate, cfg.batch_size)]
    if cfg.fine_tune:
        phases.append((PHASE_FINE_TUNE, cfg.fine_tune_lr, cfg.fine_tune_batch))

    try:
        if resume is None:
            first_phase, first_epoch, phase_best = 0, 1, math.inf
            val_loss = validation_loss(run.model, val_crops, cfg.batch_size)
            run.record(PHASE_INIT, 0, math.nan, val_loss)
            log.info("Initial validation loss %.6g", val_loss)
        else:
            run.restore(resume, keep_optimizer=True)
            run.best = resume
            run.curve.append(
                EpochRecord(
                    resume.epoch, resume.phase, math.nan, resume.best_val_loss
                )
            )
            if resume.phase == PHASE_FINE_TUNE:
                first_phase = 1
            else:
                first_phase = 0
            first_epoch = resume.epoch + 1
            if resume.phase == PHASE_INIT:
                phase_best = math.inf
            else:
                phase_best = resume.best_val_loss

        epoch = first_epoch - 1
        for phase_index in range(first_phase, len(phases)):
            phase, lr, batch_size = phases[phase_index]
            if phase_index > first_phase:
                # New phase: start over from the best weights
                run.restore(run.best, keep_optimizer=False)
                phase_best = math.inf
            epoch = run.run_phase(
                phase, phase_index, epoch + 1, lr, batch_size, phase_best
            )
    except (NonFiniteGradientError, TrainingDivergedError) as exc:
        log.error("Training diverged: %s", exc)
        if run.best is None:
            raise TrainingDivergedError(str(exc)) from exc
        return TrainResult(run.best, run.curve, diverged=True)

    return TrainResult(run.best, run.curve)


def write_loss_curves(path: pathlib.Path, curve: list[EpochRecord]) -> None:
    """
    Write `epoch,phase,train_loss,val_loss` rows.

    Rows without a training epoch (the initial evaluation and the resume
    point) leave `train_loss` empty.
    """
    with pathlib.Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "phase", "train_loss", "val_loss"])
        for record in curve:
            writer.writerow(
                [
                    record.epoch,
                    record.phase,
                    ""
                    if math.isnan(record.train_loss)
                    else repr(record.train_loss),
                    repr(record.val_loss),
                ]
            )
