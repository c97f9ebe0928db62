### stdlib imports
import dataclasses

### vendor imports
import numpy as np
import pytest

### local imports
from spgill.wavesep.core import center_crop
from spgill.wavesep.errors import ConfigurationError, InvalidArgumentError
from spgill.wavesep.gradcheck import check_model_gradients
from spgill.wavesep.model import (
    REFERENCE_VARIANTS,
    Model,
    ModelConfig,
    build_model,
    count_params,
    fit_lengths,
    layer_breakdown,
    output_length,
)
from spgill.wavesep.resampling import ResamplerKind


def _random_config(rng):
    return ModelConfig(
        levels=int(rng.integers(1, 4)),
        num_sources=int(rng.integers(2, 5)),
        input_channels=int(rng.integers(1, 3)),
        encoder_growth=int(rng.integers(1, 5)),
        mid_channels=2 * int(rng.integers(1, 5)),
        decoder_growth=2 * int(rng.integers(1, 3)),
        encoder_kernel=int(rng.integers(1, 6)),
        decoder_kernel=int(rng.integers(1, 5)),
        resampler_kind=list(ResamplerKind)[int(rng.integers(5))],
    )


class TestParameterCounts:
    @pytest.mark.parametrize(
        "kind, encoder_growth, expected",
        [
            (ResamplerKind.DWT_HAAR, 24, 15_505_098),
            (ResamplerKind.DWT_HAAR, 12, 5_806_842),
            (ResamplerKind.DECIMATE_LINEAR, 24, 10_263_498),
            (ResamplerKind.DECIMATE_LINEAR, 48, 28_312_170),
            (ResamplerKind.AVGPOOL_LINEAR, 48, 28_312_170),
            (ResamplerKind.SQUEEZE, 24, 15_505_098),
        ],
    )
    def test_full_size_models(self, kind, encoder_growth, expected):
        cfg = ModelConfig(resampler_kind=kind, encoder_growth=encoder_growth)
        assert count_params(cfg) == expected

    @pytest.mark.parametrize("name", list(REFERENCE_VARIANTS))
    def test_reference_variants_within_five_percent(self, name):
        variant = REFERENCE_VARIANTS[name]
        computed = count_params(variant.config)
        assert abs(computed / variant.reported_params - 1.0) < 0.05

    def test_tiny_model(self, tiny_config):
        assert [spec.params for spec in layer_breakdown(tiny_config)] == [
            8,
            52,
            26,
            4,
        ]
        assert count_params(tiny_config) == 90
        assert build_model(tiny_config).num_params == 90

    def test_layer_order(self, small_config):
        names = [spec.name for spec in layer_breakdown(small_config)]
        assert names == [
            "encoder_1",
            "encoder_2",
            "intermediate",
            "decoder_2",
            "decoder_1",
            "output",
        ]


class TestShapes:
    def test_tiny_output_length(self, tiny_config):
        assert output_length(tiny_config, 64) == 56
        assert fit_lengths(tiny_config, 1) == (9, 1)
        for input_len in range(1, 9):
            assert output_length(tiny_config, input_len) is None

    def test_output_length_matches_forward(self, rng):
        for _ in range(20):
            cfg = _random_config(rng)
            model = build_model(cfg, seed=int(rng.integers(1000)))
            minimum, _ = fit_lengths(cfg, 1)
            for input_len in rng.integers(minimum, minimum + 40, size=3):
                expected = output_length(cfg, int(input_len))
                x = rng.uniform(
                    -1, 1, size=(int(input_len), cfg.input_channels)
                )
                if expected is None:
                    with pytest.raises(InvalidArgumentError):
                        model.forward(x)
                    continue
                outputs, _ = model.forward(x)
                assert len(outputs) == cfg.num_sources
                for output in outputs:
                    assert output.shape == (expected, cfg.input_channels)

    def test_linear_upsampling_keeps_padded_lengths(self, tiny_config, rng):
        cfg = dataclasses.replace(
            tiny_config, resampler_kind=ResamplerKind.DECIMATE_LINEAR
        )
        # 2T - 1 linear samples already match the pre-pad length
        assert [output_length(cfg, n) for n in range(10, 14)] == [1, 3, 3, 5]
        assert [output_length(tiny_config, n) for n in range(10, 14)] == [
            2,
            3,
            3,
            5,
        ]
        outputs, _ = build_model(cfg).forward(rng.uniform(-1, 1, (13, 1)))
        assert [output.shape for output in outputs] == [(5, 1), (5, 1)]

    def test_fit_lengths_is_minimal(self, small_config):
        input_len, output_len = fit_lengths(small_config, 100)
        assert output_len >= 100
        assert output_length(small_config, input_len) == output_len
        for shorter in range(1, input_len):
            found = output_length(small_config, shorter)
            assert found is None or found < 100

    def test_too_short_input(self, tiny_config):
        model = build_model(tiny_config)
        with pytest.raises(InvalidArgumentError, match="minimum input"):
            model.forward(np.zeros((8, 1)))

    def test_wrong_channel_count(self, small_config):
        model = build_model(small_config)
        input_len, _ = fit_lengths(small_config, 8)
        with pytest.raises(ConfigurationError):
            model.forward(np.zeros((input_len, 1)))


class TestForward:
    def test_estimates_sum_to_cropped_input(self, rng):
        for _ in range(20):
            cfg = _random_config(rng)
            model = build_model(cfg, seed=int(rng.integers(1000)))
            input_len, output_len = fit_lengths(
                cfg, int(rng.integers(1, 30))
            )
            x = rng.uniform(-1, 1, size=(2, input_len, cfg.input_channels))
            outputs, _ = model.forward(x)

            total = outputs[0]
            for output in outputs[1:]:
                total = total + output
            np.testing.assert_allclose(
                total, center_crop(x, output_len), atol=1e-6
            )

    def test_direct_estimates_are_bounded(self, small_config, rng):
        model = build_model(small_config)
        input_len, _ = fit_lengths(small_config, 16)
        outputs, _ = model.forward(rng.uniform(-50, 50, (input_len, 2)))
        for output in outputs[:-1]:
            assert np.all(np.abs(output) <= 1.0)

    def test_batch_matches_single_examples(self, small_config, rng):
        model = build_model(small_config, seed=4)
        input_len, _ = fit_lengths(small_config, 12)
        x = rng.uniform(-1, 1, size=(3, input_len, 2))
        batched, _ = model.forward(x)
        for index in range(3):
            single, _ = model.forward(x[index])
            for b_out, s_out in zip(batched, single):
                np.testing.assert_allclose(b_out[index], s_out, atol=1e-12)

    def test_zero_output_layer_passes_the_input_to_the_last_source(
        self, small_config, rng
    ):
        model = build_model(small_config)
        output = model.layers["output"]
        model.layers["output"] = output.zeros_like()
        input_len, output_len = fit_lengths(small_config, 10)
        x = rng.uniform(-1, 1, size=(input_len, 2))
        outputs, _ = model.forward(x)

        for estimate in outputs[:-1]:
            np.testing.assert_array_equal(estimate, 0.0)
        np.testing.assert_allclose(
            outputs[-1], center_crop(x, output_len), atol=1e-15
        )


class TestParameters:
    def test_build_is_deterministic(self, small_config):
        first = build_model(small_config, seed=11).flat_params()
        second = build_model(small_config, seed=11).flat_params()
        other = build_model(small_config, seed=12).flat_params()
        np.testing.assert_array_equal(first, second)
        assert not np.array_equal(first, other)

    def test_flat_vector_order(self, tiny_config):
        model = build_model(tiny_config)
        vector = model.flat_params()
        first = model.layers["encoder_1"]
        np.testing.assert_array_equal(vector[:6], first.weights.ravel())
        np.testing.assert_array_equal(vector[6:8], first.bias)
        np.testing.assert_array_equal(
            model.with_flat_params(vector).flat_params(), vector
        )

    def test_wrong_vector_length(self, tiny_config):
        with pytest.raises(ConfigurationError):
            build_model(tiny_config).with_flat_params(np.zeros(89))

    def test_layers_must_match_config(self, tiny_config, small_config):
        layers = build_model(small_config).layers
        with pytest.raises(ConfigurationError):
            Model(tiny_config, layers)


class TestConfig:
    def test_channel_splitting_needs_even_mid_channels(self):
        with pytest.raises(ConfigurationError, match="mid_channels"):
            ModelConfig(mid_channels=311)

    def test_odd_mid_channels_are_fine_without_channel_splitting(self):
        cfg = ModelConfig(
            mid_channels=311, resampler_kind=ResamplerKind.DECIMATE_LINEAR
        )
        assert cfg.channel_factor == 1

    def test_odd_decoder_growth(self):
        with pytest.raises(ConfigurationError, match="decoder_growth"):
            ModelConfig(levels=3, decoder_growth=3)

    def test_single_source(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(num_sources=1)

    def test_kind_from_string(self):
        cfg = ModelConfig(resampler_kind="avgpool_linear")
        assert cfg.resampler_kind is ResamplerKind.AVGPOOL_LINEAR
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            ModelConfig.from_dict({"bogus": 1})


class TestGradients:
    @pytest.mark.parametrize("kind", list(ResamplerKind))
    def test_tiny_model_matches_finite_differences(self, tiny_config, kind):
        cfg = dataclasses.replace(tiny_config, resampler_kind=kind)
        errors = check_model_gradients(cfg, seed=5)
        assert max(errors.values()) < 1e-5

    def test_two_level_stereo_model(self):
        cfg = ModelConfig(
            levels=2,
            num_sources=3,
            input_channels=2,
            encoder_growth=2,
            mid_channels=4,
            decoder_growth=2,
            encoder_kernel=3,
            decoder_kernel=3,
        )
        errors = check_model_gradients(cfg, seed=9, output_len=3)
        assert list(errors) == [spec.name for spec in layer_breakdown(cfg)]
        assert max(errors.values()) < 1e-5

    def test_zero_upstream_gives_zero_gradients(self, small_config, rng):
        model = build_model(small_config)
        input_len, output_len = fit_lengths(small_config, 6)
        _, ctx = model.forward(rng.uniform(-1, 1, (input_len, 2)))
        grads = model.backward(
            ctx, [np.zeros((output_len, 2)) for _ in range(3)]
        )
        for layer in grads.values():
            np.testing.assert_array_equal(layer.weights, 0.0)
            np.testing.assert_array_equal(layer.bias, 0.0)

    def test_last_source_alone_reaches_the_encoder(self, small_config, rng):
        model = build_model(small_config)
        input_len, output_len = fit_lengths(small_config, 6)
        _, ctx = model.forward(rng.uniform(-1, 1, (input_len, 2)))
        grads = model.backward(
            ctx,
            [
                np.zeros((output_len, 2)),
                np.zeros((output_len, 2)),
                rng.standard_normal((output_len, 2)),
            ],
        )
        for name in ("encoder_1", "encoder_2", "output"):
            assert np.abs(grads[name].weights).max() > 0.0, name

    def test_one_gradient_per_parameter(self, small_config, rng):
        model = build_model(small_config)
        input_len, output_len = fit_lengths(small_config, 6)
        _, ctx = model.forward(rng.uniform(-1, 1, (input_len, 2)))
        grads = model.backward(
            ctx, [rng.standard_normal((output_len, 2)) for _ in range(3)]
        )
        assert list(grads) == list(model.layers)
        assert sum(
            layer.weights.size + layer.bias.size for layer in grads.values()
        ) == count_params(small_config)
