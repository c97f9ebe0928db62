"""
Down-sampling and up-sampling layers.

The wavelet layers use the lifting scheme: split the time axis into even
and odd samples, predict the odd samples from the even ones (the residual
is the detail band), update the even samples with the detail (the smooth
approximation band), then scale. The inverse layer runs the same steps
backwards, so the pair reconstructs its input exactly.

The baselines (decimation, average pooling, squeezing, linear
interpolation) live here as well so every model variant draws its layers
from one place. "Even" always means 0-based indices 0, 2, 4, ...

All layers are linear; each has a `*_backward` applying the exact adjoint.
"""

### stdlib imports
import dataclasses
import enum
import math
import typing

### vendor imports
import numpy as np

### local imports
from .core import FeatureMap
from .errors import ConfigurationError, InvalidArgumentError


@dataclasses.dataclass(frozen=True)
class LiftingWavelet:
    """
    Lifting-scheme parameters of a wavelet.

    `predict_coeffs` and `update_coeffs` define the predict operator P and
    update operator U. Only single-tap operators (a per-sample scalar
    multiply) are implemented; longer tuples are reserved for FIR lifting
    filters and rejected for now.
    """

    name: str
    predict_coeffs: tuple[float, ...]
    update_coeffs: tuple[float, ...]
    norm_const: float

    def __post_init__(self) -> None:
        if not self.norm_const > 0:
            raise ConfigurationError(
                f"Wavelet '{self.name}' needs norm_const > 0, got "
                f"{self.norm_const}"
            )
        for label, coeffs in (
            ("predict", self.predict_coeffs),
            ("update", self.update_coeffs),
        ):
            if len(coeffs) != 1:
                raise ConfigurationError(
                    f"Wavelet '{self.name}': only single-tap {label} "
                    f"operators are supported, got {len(coeffs)} taps"
                )

    @property
    def predict(self) -> float:
        return self.predict_coeffs[0]

    @property
    def update(self) -> float:
        return self.update_coeffs[0]


def haar() -> LiftingWavelet:
    """Orthonormal Haar wavelet: P = 1, U = 1/2, A = sqrt(2)."""
    return LiftingWavelet("haar", (1.0,), (0.5,), math.sqrt(2.0))


def lazy() -> LiftingWavelet:
    """Lazy wavelet: no filtering at all, the DWT becomes squeezing."""
    return LiftingWavelet("lazy", (0.0,), (0.0,), 1.0)


WAVELETS: dict[str, typing.Callable[[], LiftingWavelet]] = {
    "haar": haar,
    "lazy": lazy,
}


@dataclasses.dataclass(frozen=True)
class SubbandPair:
    """Scaled detail and approximation bands of one DWT, each `(T/2, C)`."""

    detail: FeatureMap
    approx: FeatureMap

    def __post_init__(self) -> None:
        if self.detail.shape != self.approx.shape:
            raise InvalidArgumentError(
                f"Subband shapes differ: detail {self.detail.shape}, "
                f"approx {self.approx.shape}"
            )

    def stacked(self) -> FeatureMap:
        """Channel layout of the DWT layer output: details first."""
        return np.concatenate([self.detail, self.approx], axis=-1)


def _require_even_time(z: FeatureMap, layer: str) -> None:
    if z.shape[-2] % 2:
        raise InvalidArgumentError(
            f"{layer} needs an even number of time steps, got "
            f"{z.shape[-2]}; pad the feature map first"
        )


def _require_even_channels(z: FeatureMap, layer: str) -> None:
    if z.shape[-1] % 2:
        raise InvalidArgumentError(
            f"{layer} needs an even number of channels, got {z.shape[-1]}"
        )


def _halve_channels(zt: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    half = zt.shape[-1] // 2
    return zt[..., :half], zt[..., half:]


#
# Time split / merge
#


def split_time(z: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
    """Return `(even, odd)` samples of the time axis."""
    _require_even_time(z, "split_time")
    return z[..., 0::2, :], z[..., 1::2, :]


def merge_time(even: FeatureMap, odd: FeatureMap) -> FeatureMap:
    """Interleave `even` and `odd` samples back into one time axis."""
    if even.shape != odd.shape:
        raise InvalidArgumentError(
            f"Cannot merge even {even.shape} and odd {odd.shape} samples"
        )
    shape = even.shape[:-2] + (2 * even.shape[-2], even.shape[-1])
    merged = np.empty(shape, dtype=np.result_type(even, odd))
    merged[..., 0::2, :] = even
    merged[..., 1::2, :] = odd
    return merged


#
# Lifting-scheme DWT
#


def dwt_subbands(z: FeatureMap, wavelet: LiftingWavelet) -> SubbandPair:
    """Split, predict, update and scale; see `dwt_forward`."""
    _require_even_time(z, "DWT layer")
    even, odd = split_time(z)

    # Zero lifting steps and unit scaling are skipped outright, which keeps
    # the lazy wavelet bit-identical to squeezing
    detail = odd - wavelet.predict * even if wavelet.predict else odd
    approx = even + wavelet.update * detail if wavelet.update else even
    if wavelet.norm_const != 1.0:
        detail = detail / wavelet.norm_const
        approx = approx * wavelet.norm_const

    return SubbandPair(detail=detail, approx=approx)


def dwt_forward(z: FeatureMap, wavelet: LiftingWavelet) -> FeatureMap:
    """
    DWT layer: `(T, C)` to `(T/2, 2C)`.

    Output channels are `[detail_1..detail_C, approx_1..approx_C]`.
    """
    return dwt_subbands(z, wavelet).stacked()


def idwt_forward(zt: FeatureMap, wavelet: LiftingWavelet) -> FeatureMap:
    """Inverse DWT layer: `(T, 2C)` to `(2T, C)`, exact inverse."""
    _require_even_channels(zt, "Inverse DWT layer")
    detail, approx = _halve_channels(zt)

    if wavelet.norm_const != 1.0:
        detail = detail * wavelet.norm_const
        approx = approx / wavelet.norm_const
    even = approx - wavelet.update * detail if wavelet.update else approx
    odd = detail + wavelet.predict * even if wavelet.predict else detail

    return merge_time(even, odd)


def dwt_backward(grad_out: FeatureMap, wavelet: LiftingWavelet) -> FeatureMap:
    """Adjoint of `dwt_forward`, mapping `(T/2, 2C)` to `(T, C)`."""
    _require_even_channels(grad_out, "DWT backward")
    grad_detail, grad_approx = _halve_channels(grad_out)

    if wavelet.norm_const != 1.0:
        grad_detail = grad_detail / wavelet.norm_const
        grad_approx = grad_approx * wavelet.norm_const
    # approx = even + U detail
    grad_even = grad_approx
    if wavelet.update:
        grad_detail = grad_detail + wavelet.update * grad_approx
    # detail = odd - P even
    grad_odd = grad_detail
    if wavelet.predict:
        grad_even = grad_even - wavelet.predict * grad_detail

    return merge_time(grad_even, grad_odd)


def idwt_backward(grad_out: FeatureMap, wavelet: LiftingWavelet) -> FeatureMap:
    """Adjoint of `idwt_forward`, mapping `(2T, C)` to `(T, 2C)`."""
    grad_even, grad_odd = split_time(grad_out)

    # odd = detail + P even
    grad_detail = grad_odd
    if wavelet.predict:
        grad_even = grad_even + wavelet.predict * grad_odd
    # even = approx - U detail
    grad_approx = grad_even
    if wavelet.update:
        grad_detail = grad_detail - wavelet.update * grad_even
    if wavelet.norm_const != 1.0:
        grad_detail = grad_detail * wavelet.norm_const
        grad_approx = grad_approx / wavelet.norm_const

    return np.concatenate([grad_detail, grad_approx], axis=-1)


#
# Baseline layers
#


def decimate(z: FeatureMap) -> FeatureMap:
    """Keep the even samples, no low-pass filter."""
    _require_even_time(z, "Decimation layer")
    return z[..., 0::2, :]


def decimate_backward(grad_out: FeatureMap) -> FeatureMap:
    return merge_time(grad_out, np.zeros_like(grad_out))


def linear_upsample(z: FeatureMap) -> FeatureMap:
    """
    Linear interpolation to `2T - 1` samples.

    `y[2t] = z[t]` and `y[2t + 1] = (z[t] + z[t + 1]) / 2`; no sample is
    extrapolated past the last input.
    """
    time_len = z.shape[-2]
    if time_len < 2:
        raise InvalidArgumentError(
            f"Linear upsampling needs at least 2 time steps, got {time_len}"
        )
    shape = z.shape[:-2] + (2 * time_len - 1, z.shape[-1])
    y = np.empty(shape, dtype=z.dtype)
    y[..., 0::2, :] = z
    y[..., 1::2, :] = 0.5 * (z[..., :-1, :] + z[..., 1:, :])
    return y


def linear_upsample_backward(grad_out: FeatureMap) -> FeatureMap:
    if grad_out.shape[-2] % 2 == 0:
        raise InvalidArgumentError(
            "Linear upsampling gradient must have an odd time length, got "
            f"{grad_out.shape[-2]}"
        )
    grad_mid = 0.5 * grad_out[..., 1::2, :]
    grad_z = grad_out[..., 0::2, :].copy()
    grad_z[..., :-1, :] += grad_mid
    grad_z[..., 1:, :] += grad_mid
    return grad_z


def avg_pool2(z: FeatureMap) -> FeatureMap:
    """Average pooling with kernel size 2 and stride 2."""
    even, odd = split_time(z)
    return 0.5 * (even + odd)


def avg_pool2_backward(grad_out: FeatureMap) -> FeatureMap:
    half = 0.5 * grad_out
    return merge_time(half, half)


def squeeze(z: FeatureMap) -> FeatureMap:
    """Move odd and even samples into channels: `(T, C)` to `(T/2, 2C)`."""
    even, odd = split_time(z)
    return np.concatenate([odd, even], axis=-1)


def unsqueeze(zt: FeatureMap) -> FeatureMap:
    """Exact inverse of `squeeze`."""
    _require_even_channels(zt, "Unsqueeze layer")
    odd, even = _halve_channels(zt)
    return merge_time(even, odd)


# Squeezing is a permutation, so each direction is the other's adjoint
squeeze_backward = unsqueeze
unsqueeze_backward = squeeze


#
# Resampler pairs used by the model
#


class ResamplerKind(enum.Enum):
    """Down/up-sampling pair plugged into every level of the model."""

    DWT_HAAR = "dwt_haar"
    DWT_LAZY = "dwt_lazy"
    DECIMATE_LINEAR = "decimate_linear"
    AVGPOOL_LINEAR = "avgpool_linear"
    SQUEEZE = "squeeze"


LayerFunction = typing.Callable[[FeatureMap], FeatureMap]


@dataclasses.dataclass(frozen=True)
class Resampler:
    """
    A down-sampling layer, its up-sampling partner and their adjoints.

    `channel_factor` is how many channels the down-sampling layer produces
    per input channel (the up-sampling layer divides by the same factor).
    The down-sampling output's LAST `1 / channel_factor` of the channels is
    its low-pass (retained) band.
    """

    kind: ResamplerKind
    downsample: LayerFunction
    downsample_backward: LayerFunction
    upsample: LayerFunction
    upsample_backward: LayerFunction
    channel_factor: int
    anti_aliasing: bool
    perfect_reconstruction: bool

    def retained_band(self, down: FeatureMap) -> FeatureMap:
        """Select the low-pass channels of a down-sampled map."""
        channels = down.shape[-1] // self.channel_factor
        return down[..., down.shape[-1] - channels :]


def _wavelet_resampler(
    kind: ResamplerKind, wavelet: LiftingWavelet, anti_aliasing: bool
) -> Resampler:
    return Resampler(
        kind=kind,
        downsample=lambda z: dwt_forward(z, wavelet),
        downsample_backward=lambda g: dwt_backward(g, wavelet),
        upsample=lambda z: idwt_forward(z, wavelet),
        upsample_backward=lambda g: idwt_backward(g, wavelet),
        channel_factor=2,
        anti_aliasing=anti_aliasing,
        perfect_reconstruction=True,
    )


def get_resampler(kind: typing.Union[ResamplerKind, str]) -> Resampler:
    """Build the resampler pair for `kind` (enum member or its value)."""
    try:
        kind = ResamplerKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in ResamplerKind)
        raise ConfigurationError(
            f"Unknown resampler kind '{kind}'; choose one of {choices}"
        ) from None

    if kind is ResamplerKind.DWT_HAAR:
        return _wavelet_resampler(kind, haar(), anti_aliasing=True)
    if kind is ResamplerKind.DWT_LAZY:
        return _wavelet_resampler(kind, lazy(), anti_aliasing=False)
    if kind is ResamplerKind.SQUEEZE:
        return Resampler(
            kind=kind,
            downsample=squeeze,
            downsample_backward=squeeze_backward,
            upsample=unsqueeze,
            upsample_backward=unsqueeze_backward,
            channel_factor=2,
            anti_aliasing=False,
            perfect_reconstruction=True,
        )
    if kind is ResamplerKind.DECIMATE_LINEAR:
        return Resampler(
            kind=kind,
            downsample=decimate,
            downsample_backward=decimate_backward,
            upsample=linear_upsample,
            upsample_backward=linear_upsample_backward,
            channel_factor=1,
            anti_aliasing=False,
            perfect_reconstruction=False,
        )
    return Resampler(
        kind=kind,
        downsample=avg_pool2,
        downsample_backward=avg_pool2_backward,
        upsample=linear_upsample,
        upsample_backward=linear_upsample_backward,
        channel_factor=1,
        anti_aliasing=True,
        perfect_reconstruction=False,
    )
