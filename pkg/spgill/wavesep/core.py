"""
Numerics kernel shared by every layer of the separation network.

A feature map is a float64 numpy array laid out time-major, `(T, C)`. Every
operation here also accepts leading batch axes, `(..., T, C)`, and treats
them independently, so a batch of maps is simply an array of shape
`(B, T, C)`.

All operations are pure functions. Each differentiable forward op has a
matching `*_backward` that maps an upstream gradient to the gradients of
its inputs (and parameters, where it has any).
"""

### stdlib imports
import dataclasses

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .errors import ConfigurationError, InvalidArgumentError


FeatureMap = npt.NDArray[np.float64]

# Default negative slope of every leaky ReLU in the network
DEFAULT_LEAKY_SLOPE = 0.2


def as_feature_map(
    values: npt.ArrayLike, /, name: str = "feature map"
) -> FeatureMap:
    """
    Coerce `values` into a float64 feature map and check its invariants.

    One-dimensional input is treated as a single-channel signal. Raises an
    `InvalidArgumentError` for empty maps or non-finite values.
    """
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, np.newaxis]
    if array.ndim < 2:
        raise InvalidArgumentError(
            f"{name} must have a time and a channel axis, got shape "
            f"{array.shape}"
        )
    if array.shape[-2] < 1 or array.shape[-1] < 1:
        raise InvalidArgumentError(
            f"{name} needs T >= 1 and C >= 1, got shape {array.shape}"
        )
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf values")
    return array


@dataclasses.dataclass
class ConvParams:
    """Weights `(out, in, kernel)` and bias `(out,)` of one Conv1D layer."""

    weights: npt.NDArray[np.float64]
    bias: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ConfigurationError(
                "Conv weights must be (out_channels, in_channels, "
                f"kernel_len), got shape {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"Conv bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output channels"
            )
        if min(self.weights.shape) < 1:
            raise ConfigurationError(
                f"Conv weights have an empty axis: {self.weights.shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_len(self) -> int:
        return self.weights.shape[2]

    @property
    def size(self) -> int:
        """Number of scalar parameters, weights plus biases."""
        return self.weights.size + self.bias.size

    def zeros_like(self) -> "ConvParams":
        return ConvParams(
            np.zeros_like(self.weights), np.zeros_like(self.bias)
        )

    def copy(self) -> "ConvParams":
        return ConvParams(self.weights.copy(), self.bias.copy())


def init_conv_params(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel_len: int,
) -> ConvParams:
    """
    Draw a fresh Conv1D layer.

    Weights and biases are uniform in `±sqrt(1 / (in_channels * kernel))`.
    """
    bound = np.sqrt(1.0 / (in_channels * kernel_len))
    weights = rng.uniform(
        -bound, bound, size=(out_channels, in_channels, kernel_len)
    )
    bias = rng.uniform(-bound, bound, size=(out_channels,))
    return ConvParams(weights, bias)


def _check_conv_input(x: FeatureMap, p: ConvParams) -> None:
    if x.shape[-1] != p.in_channels:
        raise ConfigurationError(
            f"Conv layer expects {p.in_channels} input channels, got "
            f"{x.shape[-1]} (input shape {x.shape})"
        )
    if x.shape[-2] < p.kernel_len:
        raise ConfigurationError(
            f"Conv layer with kernel_len {p.kernel_len} needs at least "
            f"{p.kernel_len} time steps, got {x.shape[-2]}"
        )


def _windows(x: FeatureMap, kernel_len: int) -> np.ndarray:
    # (..., T - K + 1, C, K) read-only view
    return np.lib.stride_tricks.sliding_window_view(
        x, kernel_len, axis=x.ndim - 2
    )


def conv1d_forward(x: FeatureMap, p: ConvParams) -> FeatureMap:
    """
    Valid (unpadded) 1-D convolution.

    `out[t, o] = bias[o] + sum_{i,k} weights[o, i, k] * x[t + k, i]`, with
    `T - kernel_len + 1` output time steps.
    """
    _check_conv_input(x, p)
    windows = _windows(x, p.kernel_len)
    out = np.tensordot(windows, p.weights, axes=([-2, -1], [1, 2]))
    return out + p.bias


def conv1d_backward(
    x: FeatureMap, p: ConvParams, grad_out: FeatureMap
) -> tuple[FeatureMap, ConvParams]:
    """Return `(grad_x, grad_params)` for `conv1d_forward(x, p)`."""
    _check_conv_input(x, p)
    out_len = x.shape[-2] - p.kernel_len + 1
    expected = x.shape[:-2] + (out_len, p.out_channels)
    if grad_out.shape != expected:
        raise ConfigurationError(
            f"Conv upstream gradient has shape {grad_out.shape}, expected "
            f"{expected}"
        )

    # Reduce over every batch axis and the time axis
    reduce_axes = list(range(grad_out.ndim - 1))
    grad_weights = np.tensordot(
        grad_out, _windows(x, p.kernel_len), axes=(reduce_axes, reduce_axes)
    )
    grad_bias = grad_out.sum(axis=tuple(reduce_axes))

    grad_x = np.zeros_like(x)
    for k in range(p.kernel_len):
        grad_x[..., k : k + out_len, :] += grad_out @ p.weights[:, :, k]

    return grad_x, ConvParams(grad_weights, grad_bias)


def leaky_relu(
    x: FeatureMap, slope: float = DEFAULT_LEAKY_SLOPE
) -> FeatureMap:
    """Elementwise `max(x, slope * x)`."""
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(
    x: FeatureMap, grad_out: FeatureMap, slope: float = DEFAULT_LEAKY_SLOPE
) -> FeatureMap:
    """`x` is the forward INPUT (pre-activation)."""
    return np.where(x >= 0.0, grad_out, slope * grad_out)


def tanh_act(x: FeatureMap) -> FeatureMap:
    return np.tanh(x)


def tanh_backward(y: FeatureMap, grad_out: FeatureMap) -> FeatureMap:
    """`y` is the forward OUTPUT, `tanh(x)`."""
    return grad_out * (1.0 - y * y)


def _crop_bounds(time_len: int, target_len: int) -> tuple[int, int]:
    # Odd surplus: the extra sample comes off the back
    front = (time_len - target_len) // 2
    return front, front + target_len


def center_crop(x: FeatureMap, target_len: int) -> FeatureMap:
    """
    Crop the time axis to `target_len` samples around the center.

    `floor((T - target) / 2)` samples are removed from the front and the
    remainder from the back.
    """
    time_len = x.shape[-2]
    if target_len < 1 or target_len > time_len:
        raise InvalidArgumentError(
            f"Cannot center-crop {time_len} time steps to {target_len}"
        )
    start, stop = _crop_bounds(time_len, target_len)
    return x[..., start:stop, :]


def center_crop_backward(grad_out: FeatureMap, time_len: int) -> FeatureMap:
    """Scatter the gradient of a cropped map back into `time_len` steps."""
    start, stop = _crop_bounds(time_len, grad_out.shape[-2])
    grad_x = np.zeros(
        grad_out.shape[:-2] + (time_len, grad_out.shape[-1]),
        dtype=grad_out.dtype,
    )
    grad_x[..., start:stop, :] = grad_out
    return grad_x


def concat_channels(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Stack `b`'s channels after `a`'s. Time lengths must already agree."""
    if a.shape[:-1] != b.shape[:-1]:
        raise InvalidArgumentError(
            f"Cannot concatenate maps of shapes {a.shape} and {b.shape}; "
            "crop to a common time length first"
        )
    return np.concatenate([a, b], axis=-1)


def split_channels(
    grad_out: FeatureMap, a_channels: int
) -> tuple[FeatureMap, FeatureMap]:
    """Backward of `concat_channels`: split at `a_channels`."""
    return grad_out[..., :a_channels], grad_out[..., a_channels:]


def reflection_pad_end(x: FeatureMap) -> FeatureMap:
    """
    Append one mirrored sample, `x[T - 2]`, to the end of the time axis.

    The edge sample itself is not repeated: `[1, 2, 3]` becomes
    `[1, 2, 3, 2]`.
    """
    if x.shape[-2] < 2:
        raise InvalidArgumentError(
            f"Reflection padding needs at least 2 time steps, got "
            f"{x.shape[-2]}"
        )
    return np.concatenate([x, x[..., -2:-1, :]], axis=-2)


def reflection_pad_end_backward(grad_out: FeatureMap) -> FeatureMap:
    grad_x = grad_out[..., :-1, :].copy()
    grad_x[..., -2, :] += grad_out[..., -1, :]
    return grad_x


def mse_loss(
    pred: npt.ArrayLike, target: npt.ArrayLike
) -> tuple[float, np.ndarray]:
    """
    Mean squared error over every element of a batch.

    Returns `(loss, grad)` where `grad` is the gradient with respect to
    `pred`, `2 * (pred - target) / element_count`.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(
            f"Loss shapes differ: prediction {pred.shape}, target "
            f"{target.shape}"
        )
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size
