"""
Desk-scale training runs on the synthetic two-source dataset.

Slow; run with `pytest -m slow`.
"""

### stdlib imports
import pathlib
import warnings

### vendor imports
import numpy as np
import pytest

### local imports
from spgill.wavesep.config import RunConfig
from spgill.wavesep.data import generate_synth, split_synth
from spgill.wavesep.model import build_model
from spgill.wavesep.training import train


DESK_CONFIG = pathlib.Path(__file__).parent.parent / "configs" / "desk.txt"

SEEDS = (0, 1, 2)


def _desk_run(kind, seed, *overrides):
    run = RunConfig.load(
        DESK_CONFIG,
        [f"model.resampler_kind={kind}", f"train.seed={seed}", *overrides],
    )
    spec = run.synth_spec()
    splits = split_synth(spec, generate_synth(spec))
    train_cfg = run.train_config()
    return train(
        build_model(run.model_config(), seed=train_cfg.seed),
        splits.train,
        splits.validation,
        train_cfg,
    )


@pytest.fixture(scope="module")
def desk_results():
    return {
        kind: [_desk_run(kind, seed) for seed in SEEDS]
        for kind in ("dwt_haar", "decimate_linear")
    }


@pytest.mark.slow
def test_every_run_halves_the_validation_loss(desk_results):
    for kind, results in desk_results.items():
        for seed, result in zip(SEEDS, results):
            initial = result.curve[0].val_loss
            assert not result.diverged, (kind, seed)
            assert result.checkpoint.best_val_loss <= 0.5 * initial, (
                kind,
                seed,
            )


@pytest.mark.slow
def test_wavelet_layers_against_decimation(desk_results):
    final = {
        kind: np.mean([result.curve[-1].val_loss for result in results])
        for kind, results in desk_results.items()
    }
    # Reported, not enforced: the ordering is not guaranteed at this scale
    if final["dwt_haar"] > final["decimate_linear"]:
        warnings.warn(
            f"Mean final validation loss of dwt_haar ({final['dwt_haar']:.4g})"
            f" exceeds decimate_linear ({final['decimate_linear']:.4g})"
        )


@pytest.mark.slow
def test_desk_runs_are_reproducible():
    # Capped at two main-phase epochs
    short = ("train.max_epochs=2", "train.fine_tune=false")
    original = _desk_run("dwt_haar", SEEDS[0], *short)
    repeat = _desk_run("dwt_haar", SEEDS[0], *short)
    assert [(r.epoch, r.phase) for r in repeat.curve] == [
        (r.epoch, r.phase) for r in original.curve
    ]
    np.testing.assert_array_equal(
        [[r.train_loss, r.val_loss] for r in repeat.curve],
        [[r.train_loss, r.val_loss] for r in original.curve],
    )
