"""
Central finite-difference gradient checks.
"""

### stdlib imports
import logging
import typing

### vendor imports
import numpy as np
import numpy.typing as npt

### local imports
from .errors import InvalidArgumentError
from .model import ModelConfig, build_model, fit_lengths, layer_breakdown


log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5

# Gradient agreement demanded by `wavesep gradcheck`
DEFAULT_TOLERANCE = 1e-5

# Smallest architecture worth checking; one level, 90 parameters
TINY_CONFIG = ModelConfig(
    levels=1,
    num_sources=2,
    input_channels=1,
    encoder_growth=2,
    mid_channels=4,
    decoder_growth=2,
    encoder_kernel=3,
    decoder_kernel=3,
)


def numerical_gradient(
    func: typing.Callable[[npt.NDArray[np.float64]], float],
    x: npt.ArrayLike,
    step: float = DEFAULT_STEP,
) -> npt.NDArray[np.float64]:
    """
    Gradient of the scalar function `func` at `x` by central differences,
    `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
    """
    if not step > 0:
        raise InvalidArgumentError(f"step must be > 0, got {step}")

    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in range(x.size):
        original = x.flat[index]
        x.flat[index] = original + step
        upper = func(x)
        x.flat[index] = original - step
        lower = func(x)
        x.flat[index] = original
        grad.flat[index] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(
    analytic: npt.ArrayLike, numeric: npt.ArrayLike
) -> float:
    """`|a - n| / max(|a| + |n|, 1e-30)` over whole arrays (L2 norms)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise InvalidArgumentError(
            f"Gradient shapes differ: {analytic.shape} vs {numeric.shape}"
        )
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(scale, 1e-30))


def check_model_gradients(
    cfg: ModelConfig = TINY_CONFIG,
    seed: int = 0,
    batch_size: int = 2,
    output_len: int = 4,
    step: float = DEFAULT_STEP,
) -> dict[str, float]:
    """
    Compare `Model.backward` against finite differences of the model.

    The scalar checked is `sum_n <g_n, y_n>` for random upstream gradients
    `g_n`, so `backward(ctx, g)` is its exact parameter gradient. Returns
    the relative error per layer, in parameter order.
    """
    rng = np.random.default_rng([seed, 1])
    model = build_model(cfg, seed)
    input_len, output_len = fit_lengths(cfg, output_len)
    x = rng.uniform(
        -0.5, 0.5, size=(batch_size, input_len, cfg.input_channels)
    )
    upstream = [
        rng.standard_normal((batch_size, output_len, cfg.input_channels))
        for _ in range(cfg.num_sources)
    ]

    def objective(params: npt.NDArray[np.float64]) -> float:
        outputs, _ = model.with_flat_params(params).forward(x)
        return float(
            sum(np.sum(g * y) for g, y in zip(upstream, outputs))
        )

    _, ctx = model.forward(x)
    analytic = model.backward(ctx, upstream)
    numeric = numerical_gradient(objective, model.flat_params(), step)

    errors: dict[str, float] = {}
    offset = 0
    for spec in layer_breakdown(cfg):
        layer = analytic[spec.name]
        expected = np.concatenate([layer.weights.ravel(), layer.bias])
        errors[spec.name] = relative_error(
            expected, numeric[offset : offset + spec.params]
        )
        offset += spec.params
        log.debug("%s: relative error %.3g", spec.name, errors[spec.name])
    return errors
