"""
Wave-U-Net style encoder/decoder with a pluggable resampling pair.

Layer stack for `L` levels and `N` sources:

    input (T, C_s)
    DS block l = 1..L:   Conv1D(C_e * l, f_e) + leaky ReLU
                         [reflection pad if odd] + down-sampling layer
    intermediate:        Conv1D(C_m, f_e) + leaky ReLU
    US block l = L..1:   up-sampling layer
                         [drop last sample if padded and C doubled]
                         concat(center-cropped DS feature l)
                         Conv1D(C_d * l, f_d) + leaky ReLU
    output:              concat(center-cropped input)
                         Conv1D(C_s * (N - 1), 1) + tanh

The N-th estimate is the cropped input minus the sum of the other N - 1,
so the estimates always add up to the input.
"""

### stdlib imports
import dataclasses
import logging
import typing

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .core import (
    DEFAULT_LEAKY_SLOPE,
    ConvParams,
    FeatureMap,
    as_feature_map,
    center_crop,
    center_crop_backward,
    concat_channels,
    conv1d_backward,
    conv1d_forward,
    init_conv_params,
    leaky_relu,
    leaky_relu_backward,
    reflection_pad_end,
    reflection_pad_end_backward,
    split_channels,
    tanh_act,
    tanh_backward,
)
from .errors import ConfigurationError, InvalidArgumentError
from .resampling import ResamplerKind, get_resampler


log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size model."""

    levels: int = 12
    num_sources: int = 4
    input_channels: int = 2
    encoder_growth: int = 24
    mid_channels: int = 312
    decoder_growth: int = 24
    encoder_kernel: int = 15
    decoder_kernel: int = 5
    resampler_kind: ResamplerKind = ResamplerKind.DWT_HAAR
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self) -> None:
        # Accept the plain string value of the resampler kind
        if not isinstance(self.resampler_kind, ResamplerKind):
            object.__setattr__(
                self,
                "resampler_kind",
                get_resampler(self.resampler_kind).kind,
            )

        for name in (
            "levels",
            "input_channels",
            "encoder_growth",
            "mid_channels",
            "decoder_growth",
            "encoder_kernel",
            "decoder_kernel",
        ):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(
                    f"model.{name} must be an integer >= 1, got {value!r}"
                )
        if self.num_sources < 2:
            raise ConfigurationError(
                f"model.num_sources must be >= 2, got {self.num_sources}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError(
                f"model.leaky_slope must lie in (0, 1), got "
                f"{self.leaky_slope}"
            )

        # Channel-splitting up-samplers need an even channel count at
        # every up-sampling input
        if self.channel_factor == 2:
            if self.mid_channels % 2:
                raise ConfigurationError(
                    f"model.mid_channels must be even for resampler "
                    f"'{self.resampler_kind.value}', got {self.mid_channels}"
                )
            for level in range(2, self.levels + 1):
                if (self.decoder_growth * level) % 2:
                    raise ConfigurationError(
                        "model.decoder_growth * level must be even for "
                        f"resampler '{self.resampler_kind.value}' "
                        f"(level {level} gives "
                        f"{self.decoder_growth * level})"
                    )

    @property
    def channel_factor(self) -> int:
        return get_resampler(self.resampler_kind).channel_factor

    def to_dict(self) -> dict[str, typing.Any]:
        values = dataclasses.asdict(self)
        values["resampler_kind"] = self.resampler_kind.value
        return values

    @classmethod
    def from_dict(cls, values: dict[str, typing.Any]) -> "ModelConfig":
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(
                f"Unknown model config keys: {', '.join(unknown)}"
            )
        return cls(**values)


class ReferenceVariant(typing.NamedTuple):
    """A model of the comparison table and the parameter count reported."""

    config: ModelConfig
    reported_params: float
    anti_aliasing: bool
    perfect_reconstruction: bool


REFERENCE_VARIANTS: dict[str, ReferenceVariant] = {
    "wave-u-net-plus": ReferenceVariant(
        ModelConfig(
            encoder_growth=48,
            resampler_kind=ResamplerKind.DECIMATE_LINEAR,
        ),
        28.31e6,
        False,
        False,
    ),
    "wave-u-net": ReferenceVariant(
        ModelConfig(resampler_kind=ResamplerKind.DECIMATE_LINEAR),
        10.26e6,
        False,
        False,
    ),
    "proposed": ReferenceVariant(ModelConfig(), 15.15e6, True, True),
    "proposed-small": ReferenceVariant(
        ModelConfig(encoder_growth=12), 5.81e6, True, True
    ),
    "average-pooling": ReferenceVariant(
        ModelConfig(
            encoder_growth=48,
            resampler_kind=ResamplerKind.AVGPOOL_LINEAR,
        ),
        28.31e6,
        True,
        False,
    ),
    "squeezing": ReferenceVariant(
        ModelConfig(resampler_kind=ResamplerKind.SQUEEZE),
        15.51e6,
        False,
        True,
    ),
}


class LayerSpec(typing.NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    kernel_len: int

    @property
    def params(self) -> int:
        return (
            self.out_channels * self.in_channels * self.kernel_len
            + self.out_channels
        )


def _encoder_name(level: int) -> str:
    return f"encoder_{level}"


def _decoder_name(level: int) -> str:
    return f"decoder_{level}"


def layer_breakdown(cfg: ModelConfig) -> list[LayerSpec]:
    """
    Every Conv1D layer of `cfg`, in parameter (checkpoint) order.

    Order: encoder levels 1..L, intermediate, decoder levels L..1, output.
    """
    factor = cfg.channel_factor
    layers: list[LayerSpec] = []

    for level in range(1, cfg.levels + 1):
        in_channels = (
            cfg.input_channels
            if level == 1
            else factor * cfg.encoder_growth * (level - 1)
        )
        layers.append(
            LayerSpec(
                _encoder_name(level),
                in_channels,
                cfg.encoder_growth * level,
                cfg.encoder_kernel,
            )
        )

    layers.append(
        LayerSpec(
            "intermediate",
            factor * cfg.encoder_growth * cfg.levels,
            cfg.mid_channels,
            cfg.encoder_kernel,
        )
    )

    for level in range(cfg.levels, 0, -1):
        deeper_channels = (
            cfg.mid_channels
            if level == cfg.levels
            else cfg.decoder_growth * (level + 1)
        )
        layers.append(
            LayerSpec(
                _decoder_name(level),
                deeper_channels // factor + cfg.encoder_growth * level,
                cfg.decoder_growth * level,
                cfg.decoder_kernel,
            )
        )

    layers.append(
        LayerSpec(
            "output",
            cfg.decoder_growth + cfg.input_channels,
            cfg.input_channels * (cfg.num_sources - 1),
            1,
        )
    )
    return layers


def count_params(cfg: ModelConfig) -> int:
    """Exact number of scalar weights and biases, output layer included."""
    return sum(layer.params for layer in layer_breakdown(cfg))


def output_length(cfg: ModelConfig, input_len: int) -> typing.Optional[int]:
    """
    Time length of the model output for an input of `input_len` samples.

    Mirrors the shape bookkeeping of `Model.forward` exactly and returns
    None when some layer would reject its input.
    """
    factor = cfg.channel_factor
    time_len = input_len
    skips: list[tuple[int, bool]] = []

    for _ in range(cfg.levels):
        if time_len < cfg.encoder_kernel:
            return None
        time_len -= cfg.encoder_kernel - 1
        padded = time_len % 2 == 1
        if padded:
            if time_len < 2:
                return None
            time_len += 1
        skips.append((time_len - padded, padded))
        time_len //= 2

    if time_len < cfg.encoder_kernel:
        return None
    time_len -= cfg.encoder_kernel - 1

    for skip_len, padded in reversed(skips):
        if factor == 2:
            # Drop the sample that came from the reflection pad
            time_len = 2 * time_len - padded
        else:
            if time_len < 2:
                return None
            time_len = 2 * time_len - 1
        if time_len < cfg.decoder_kernel or time_len > skip_len:
            return None
        time_len -= cfg.decoder_kernel - 1

    if time_len > input_len:
        return None
    return time_len


def fit_lengths(cfg: ModelConfig, desired_output_len: int) -> tuple[int, int]:
    """
    Smallest admissible input length whose output has at least
    `desired_output_len` samples.

    Returns `(input_len, output_len)`, where `output_len` is the exact
    length `Model.forward` produces for `input_len`.
    """
    if desired_output_len < 1:
        raise InvalidArgumentError(
            f"desired_output_len must be >= 1, got {desired_output_len}"
        )

    # Every level can shrink the map by at most its two kernels at twice
    # the previous level's rate, so the context is bounded by this
    context_bound = 2 ** (cfg.levels + 2) * (
        cfg.encoder_kernel + cfg.decoder_kernel + 2
    )
    for input_len in range(
        desired_output_len, desired_output_len + context_bound + 1
    ):
        output_len = output_length(cfg, input_len)
        if output_len is not None and output_len >= desired_output_len:
            return input_len, output_len

    raise ConfigurationError(
        f"No input length up to {desired_output_len + context_bound} yields "
        f"{desired_output_len} output samples for this model config"
    )


@dataclasses.dataclass
class _ConvCache:
    # Conv input and the pre-activation output
    inputs: FeatureMap
    pre: FeatureMap


@dataclasses.dataclass
class _DecoderCache(_ConvCache):
    up_channels: int
    skip_len: int


@dataclasses.dataclass
class ForwardContext:
    """Activations of one forward pass, consumed by `Model.backward`."""

    input: FeatureMap
    output_shape: tuple[int, ...] = ()
    encoder: list[_ConvCache] = dataclasses.field(default_factory=list)
    padded: list[bool] = dataclasses.field(default_factory=list)
    # Levels whose up-sampled map is one sample longer than the skip
    trimmed: list[bool] = dataclasses.field(default_factory=list)
    intermediate: typing.Optional[_ConvCache] = None
    decoder: list[_DecoderCache] = dataclasses.field(default_factory=list)
    output: typing.Optional[_ConvCache] = None
    estimates: typing.Optional[FeatureMap] = None


class Model:
    """
    Separation network with its weights.

    The instance is never mutated by `forward` or `backward`; activations
    live in the returned `ForwardContext`, one per call.
    """

    def __init__(
        self, cfg: ModelConfig, layers: dict[str, ConvParams]
    ) -> None:
        self.cfg = cfg
        self.resampler = get_resampler(cfg.resampler_kind)

        # Check every layer against the architecture
        expected = layer_breakdown(cfg)
        if [spec.name for spec in expected] != list(layers):
            raise ConfigurationError(
                "Model layers do not match the config: expected "
                f"{[spec.name for spec in expected]}, got {list(layers)}"
            )
        for spec in expected:
            shape = layers[spec.name].weights.shape
            if shape != (spec.out_channels, spec.in_channels, spec.kernel_len):
                raise ConfigurationError(
                    f"Layer '{spec.name}' has weights {shape}, expected "
                    f"{(spec.out_channels, spec.in_channels, spec.kernel_len)}"
                )
        self.layers = layers

    #
    # Parameter vector helpers
    #

    @property
    def num_params(self) -> int:
        return sum(layer.size for layer in self.layers.values())

    def flat_params(self) -> npt.NDArray[np.float64]:
        """All parameters as one vector, weights before bias per layer."""
        return flatten_layers(self.layers)

    def with_flat_params(self, vector: npt.ArrayLike) -> "Model":
        """A new model with the same config and weights taken from `vector`."""
        return Model(self.cfg, unflatten_layers(self.cfg, vector))

    #
    # Forward / backward
    #

    def forward(
        self, x: npt.ArrayLike
    ) -> tuple[list[FeatureMap], ForwardContext]:
        """
        Separate `x` (shape `(T, C_s)` or a batch `(B, T, C_s)`).

        Returns the N source estimates, all of the same (cropped) length,
        plus the context needed by `backward`.
        """
        cfg = self.cfg
        x = as_feature_map(x, "model input")
        if x.shape[-1] != cfg.input_channels:
            raise ConfigurationError(
                f"Model expects {cfg.input_channels} input channels, got "
                f"{x.shape[-1]}"
            )
        if output_length(cfg, x.shape[-2]) is None:
            minimum, _ = fit_lengths(cfg, 1)
            raise InvalidArgumentError(
                f"Input of {x.shape[-2]} samples is not admissible for this "
                f"model; the minimum input length is {minimum}"
            )

        slope = cfg.leaky_slope
        ctx = ForwardContext(input=x)
        skips: list[FeatureMap] = []

        # Encoder
        h = x
        for level in range(1, cfg.levels + 1):
            conv = self.layers[_encoder_name(level)]
            pre = conv1d_forward(h, conv)
            ctx.encoder.append(_ConvCache(h, pre))
            h = leaky_relu(pre, slope)
            skips.append(h)
            padded = h.shape[-2] % 2 == 1
            ctx.padded.append(padded)
            ctx.trimmed.append(padded and cfg.channel_factor == 2)
            if padded:
                h = reflection_pad_end(h)
            h = self.resampler.downsample(h)

        # Intermediate block
        pre = conv1d_forward(h, self.layers["intermediate"])
        ctx.intermediate = _ConvCache(h, pre)
        h = leaky_relu(pre, slope)

        # Decoder
        for level in range(cfg.levels, 0, -1):
            up = self.resampler.upsample(h)
            if ctx.trimmed[level - 1]:
                up = up[..., :-1, :]
            skip = skips[level - 1]
            cat = concat_channels(up, center_crop(skip, up.shape[-2]))
            pre = conv1d_forward(cat, self.layers[_decoder_name(level)])
            ctx.decoder.append(
                _DecoderCache(cat, pre, up.shape[-1], skip.shape[-2])
            )
            h = leaky_relu(pre, slope)

        # Output layer and the difference estimate
        cropped_input = center_crop(x, h.shape[-2])
        cat = concat_channels(h, cropped_input)
        pre = conv1d_forward(cat, self.layers["output"])
        ctx.output = _ConvCache(cat, pre)
        ctx.estimates = tanh_act(pre)
        ctx.output_shape = cropped_input.shape

        channels = cfg.input_channels
        estimates = [
            ctx.estimates[..., n * channels : (n + 1) * channels]
            for n in range(cfg.num_sources - 1)
        ]
        remainder = cropped_input
        for estimate in estimates:
            remainder = remainder - estimate

        return estimates + [remainder], ctx

    def backward(
        self, ctx: ForwardContext, grads: typing.Sequence[FeatureMap]
    ) -> dict[str, ConvParams]:
        """
        Parameter gradients for upstream gradients of the N outputs.

        Returns a layer-name keyed dict in parameter order.
        """
        cfg = self.cfg
        slope = cfg.leaky_slope
        if len(grads) != cfg.num_sources:
            raise ConfigurationError(
                f"Expected {cfg.num_sources} output gradients, got "
                f"{len(grads)}"
            )
        grads = [np.asarray(grad, dtype=np.float64) for grad in grads]
        for index, grad in enumerate(grads):
            if grad.shape != ctx.output_shape:
                raise ConfigurationError(
                    f"Gradient of output {index + 1} has shape "
                    f"{grad.shape}, expected {ctx.output_shape}"
                )

        param_grads: dict[str, ConvParams] = {}

        # The N-th output depends negatively on every direct estimate; its
        # dependency on the input is not needed for parameter gradients
        grad_last = grads[-1]
        grad_estimates = np.concatenate(
            [grad - grad_last for grad in grads[:-1]], axis=-1
        )
        grad_pre = tanh_backward(ctx.estimates, grad_estimates)
        grad_cat, param_grads["output"] = conv1d_backward(
            ctx.output.inputs, self.layers["output"], grad_pre
        )
        grad_h, _ = split_channels(grad_cat, cfg.decoder_growth)

        # Decoder, in reverse order of the forward pass (level 1 first)
        skip_grads: dict[int, FeatureMap] = {}
        for level, cache in zip(range(1, cfg.levels + 1), ctx.decoder[::-1]):
            name = _decoder_name(level)
            grad_pre = leaky_relu_backward(cache.pre, grad_h, slope)
            grad_cat, param_grads[name] = conv1d_backward(
                cache.inputs, self.layers[name], grad_pre
            )
            grad_up, grad_skip = split_channels(grad_cat, cache.up_channels)
            skip_grads[level] = center_crop_backward(
                grad_skip, cache.skip_len
            )
            if ctx.trimmed[level - 1]:
                grad_up = np.concatenate(
                    [grad_up, np.zeros_like(grad_up[..., :1, :])], axis=-2
                )
            grad_h = self.resampler.upsample_backward(grad_up)

        # Intermediate block
        grad_pre = leaky_relu_backward(ctx.intermediate.pre, grad_h, slope)
        grad_h, param_grads["intermediate"] = conv1d_backward(
            ctx.intermediate.inputs, self.layers["intermediate"], grad_pre
        )

        # Encoder, deepest level first
        for level in range(cfg.levels, 0, -1):
            name = _encoder_name(level)
            cache = ctx.encoder[level - 1]
            grad_h = self.resampler.downsample_backward(grad_h)
            if ctx.padded[level - 1]:
                grad_h = reflection_pad_end_backward(grad_h)
            grad_h = grad_h + skip_grads[level]
            grad_pre = leaky_relu_backward(cache.pre, grad_h, slope)
            grad_h, param_grads[name] = conv1d_backward(
                cache.inputs, self.layers[name], grad_pre
            )

        # Parameter order
        return {name: param_grads[name] for name in self.layers}


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Create a model with deterministic weights drawn from `seed`."""
    rng = np.random.default_rng(seed)
    layers = {
        spec.name: init_conv_params(
            rng, spec.in_channels, spec.out_channels, spec.kernel_len
        )
        for spec in layer_breakdown(cfg)
    }
    log.debug(
        "Built %s model with %d parameters (seed %d)",
        cfg.resampler_kind.value,
        count_params(cfg),
        seed,
    )
    return Model(cfg, layers)


def flatten_layers(
    layers: dict[str, ConvParams]
) -> npt.NDArray[np.float64]:
    """Concatenate layers (weights then bias each) into one vector."""
    return np.concatenate(
        [
            part
            for layer in layers.values()
            for part in (layer.weights.ravel(), layer.bias)
        ]
    )


def unflatten_layers(
    cfg: ModelConfig, vector: npt.ArrayLike
) -> dict[str, ConvParams]:
    """Inverse of `flatten_layers` for the architecture of `cfg`."""
    vector = np.asarray(vector, dtype=np.float64)
    expected = count_params(cfg)
    if vector.shape != (expected,):
        raise ConfigurationError(
            f"Parameter vector has shape {vector.shape}, expected "
            f"({expected},)"
        )

    layers: dict[str, ConvParams] = {}
    offset = 0
    for spec in layer_breakdown(cfg):
        weight_count = spec.out_channels * spec.in_channels * spec.kernel_len
        weights = vector[offset : offset + weight_count].reshape(
            spec.out_channels, spec.in_channels, spec.kernel_len
        )
        offset += weight_count
        bias = vector[offset : offset + spec.out_channels]
        offset += spec.out_channels
        layers[spec.name] = ConvParams(weights.copy(), bias.copy())
    return layers
