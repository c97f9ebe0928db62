### vendor imports
import numpy as np
import pytest

### local imports
from spgill.wavesep.data import SynthSpec, generate_synth, split_synth
from spgill.wavesep.gradcheck import TINY_CONFIG
from spgill.wavesep.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_config():
    """One level, one channel, two sources; 90 parameters."""
    return TINY_CONFIG


@pytest.fixture
def small_config():
    """Two levels, stereo, three sources."""
    return ModelConfig(
        levels=2,
        num_sources=3,
        input_channels=2,
        encoder_growth=4,
        mid_channels=8,
        decoder_growth=4,
        encoder_kernel=5,
        decoder_kernel=3,
    )


@pytest.fixture
def synth_spec():
    return SynthSpec(
        num_tracks=4,
        duration_samples=1600,
        sample_rate=8000,
        seed=3,
        validation_tracks=1,
        test_tracks=1,
    )


@pytest.fixture
def synth_splits(synth_spec):
    return split_synth(synth_spec, generate_synth(synth_spec))
