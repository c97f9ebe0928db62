### stdlib imports
import csv

### vendor imports
import numpy as np
import pytest
from click.testing import CliRunner

### local imports
from spgill.wavesep import evaluation
from spgill.wavesep.cli import CHECKPOINT_NAME, LOSS_CURVES_NAME, cli
from spgill.wavesep.config import RESOLVED_CONFIG_NAME
from spgill.wavesep.data import PCM_SCALE, load_manifest, read_wav, write_wav
from spgill.wavesep.model import REFERENCE_VARIANTS
from spgill.wavesep.training import load_checkpoint


TINY_MODEL = [
    "model.levels=1",
    "model.num_sources=2",
    "model.input_channels=1",
    "model.encoder_growth=2",
    "model.mid_channels=4",
    "model.decoder_growth=2",
    "model.encoder_kernel=3",
    "model.decoder_kernel=3",
]

QUICK_TRAINING = [
    "train.segment_len=64",
    "train.batch_size=2",
    "train.learning_rate=0.01",
    "train.epoch_batches=2",
    "train.max_epochs=2",
    "train.val_crops_per_track=1",
    "train.fine_tune=false",
    "train.seed=3",
]

SMALL_SYNTH = [
    "synth.num_tracks=3",
    "synth.duration_samples=800",
    "synth.validation_tracks=1",
    "synth.test_tracks=1",
]


def _sets(*groups):
    return [
        arg for group in groups for item in group for arg in ("--set", item)
    ]


def _invoke(*args):
    return CliRunner(env={"COLUMNS": "200"}).invoke(
        cli, [str(arg) for arg in args]
    )


def _csv_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run")
    result = _invoke(
        "train",
        *_sets(TINY_MODEL, QUICK_TRAINING, SMALL_SYNTH),
        "--outdir",
        outdir,
    )
    assert result.exit_code == 0, result.output
    return outdir


class TestTrain:
    def test_artifacts(self, trained_run):
        for name in (CHECKPOINT_NAME, LOSS_CURVES_NAME, RESOLVED_CONFIG_NAME):
            assert (trained_run / name).is_file()
        assert list((trained_run / "logs").glob("*.log"))

        rows = _csv_rows(trained_run / LOSS_CURVES_NAME)
        assert rows[0] == ["epoch", "phase", "train_loss", "val_loss"]
        assert [row[:2] for row in rows[1:]] == [
            ["0", "init"],
            ["1", "main"],
            ["2", "main"],
        ]

    def test_resolved_config_records_the_overrides(self, trained_run):
        text = (trained_run / RESOLVED_CONFIG_NAME).read_text()
        assert "model.levels = 1\n" in text
        assert f"output_dir = {trained_run}\n" in text

    def test_checkpoint_holds_the_configs(self, trained_run):
        state = load_checkpoint(trained_run / CHECKPOINT_NAME)
        assert state.model_config.levels == 1
        assert state.train_config.segment_len == 64
        assert state.to_model().num_params == 90

    def test_same_seed_same_curve(self, trained_run, tmp_path):
        result = _invoke(
            "train",
            *_sets(TINY_MODEL, QUICK_TRAINING, SMALL_SYNTH),
            "--outdir",
            tmp_path,
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / LOSS_CURVES_NAME).read_text() == (
            trained_run / LOSS_CURVES_NAME
        ).read_text()

    def test_resume(self, trained_run, tmp_path):
        result = _invoke(
            "train",
            *_sets(TINY_MODEL, QUICK_TRAINING, SMALL_SYNTH),
            "--outdir",
            tmp_path,
            "--resume",
            trained_run / CHECKPOINT_NAME,
        )
        assert result.exit_code == 0, result.output
        start = load_checkpoint(trained_run / CHECKPOINT_NAME).epoch
        epochs = [row[0] for row in _csv_rows(tmp_path / LOSS_CURVES_NAME)]
        assert epochs[1:] == [str(start + offset) for offset in range(3)]

    def test_unknown_key(self, tmp_path):
        result = _invoke(
            "train", "--set", "model.depth=3", "--outdir", tmp_path
        )
        assert result.exit_code == 2
        assert "Unknown config key 'model.depth'" in result.output

    def test_sources_must_match_the_dataset(self, tmp_path):
        result = _invoke(
            "train",
            *_sets(TINY_MODEL, QUICK_TRAINING, SMALL_SYNTH),
            "--set",
            "model.num_sources=3",
            "--outdir",
            tmp_path,
        )
        assert result.exit_code == 2
        assert "model.num_sources" in result.output


class TestSeparate:
    def test_writes_one_file_per_source(self, trained_run, tmp_path, rng):
        mixture_path = tmp_path / "mix.wav"
        write_wav(mixture_path, rng.uniform(-0.3, 0.3, (300, 1)), 8000)
        result = _invoke(
            "separate",
            "--checkpoint",
            trained_run / CHECKPOINT_NAME,
            "--input",
            mixture_path,
            "--outdir",
            tmp_path / "out",
        )
        assert result.exit_code == 0, result.output

        mixture, _ = read_wav(mixture_path)
        model = load_checkpoint(trained_run / CHECKPOINT_NAME).to_model()
        expected = evaluation.separate(model, mixture, 64)
        for index, estimate in enumerate(expected.estimates, start=1):
            written, rate = read_wav(tmp_path / "out" / f"source_{index}.wav")
            assert rate == 8000
            np.testing.assert_allclose(
                written,
                np.clip(estimate, -1.0, 32767 / PCM_SCALE),
                atol=0.5 / PCM_SCALE + 1e-9,
            )

    def test_input_too_short(self, trained_run, tmp_path):
        mixture_path = tmp_path / "short.wav"
        write_wav(mixture_path, np.zeros(8), 8000)
        result = _invoke(
            "separate",
            "--checkpoint",
            trained_run / CHECKPOINT_NAME,
            "--input",
            mixture_path,
            "--outdir",
            tmp_path / "out",
        )
        assert result.exit_code == 2
        assert "minimum model input length" in result.output

    def test_channel_mismatch(self, trained_run, tmp_path):
        mixture_path = tmp_path / "stereo.wav"
        write_wav(mixture_path, np.zeros((100, 2)), 8000)
        result = _invoke(
            "separate",
            "--checkpoint",
            trained_run / CHECKPOINT_NAME,
            "--input",
            mixture_path,
            "--outdir",
            tmp_path / "out",
        )
        assert result.exit_code == 2


class TestSynthAndEvaluate:
    def test_synth_then_evaluate(self, trained_run, tmp_path):
        result = _invoke(
            "synth", *_sets(SMALL_SYNTH), "--outdir", tmp_path / "data"
        )
        assert result.exit_code == 0, result.output
        manifest = tmp_path / "data" / "manifest.tsv"
        splits = load_manifest(manifest)
        assert [len(tracks) for _, tracks in splits.items()] == [1, 1, 1]

        output = tmp_path / "metrics.csv"
        result = _invoke(
            "evaluate",
            "--checkpoint",
            trained_run / CHECKPOINT_NAME,
            "--manifest",
            manifest,
            "--frame-len",
            200,
            "--output",
            output,
        )
        assert result.exit_code == 0, result.output
        rows = _csv_rows(output)
        assert rows[0][:2] == ["track", "source"]
        assert [row[0] for row in rows[1:]] == [
            "synth_002",
            "synth_002",
            "ALL",
            "ALL",
        ]


class TestParams:
    def test_variants(self, tmp_path):
        output = tmp_path / "variants.csv"
        result = _invoke("params", "--variants", "--output", output)
        assert result.exit_code == 0, result.output

        rows = _csv_rows(output)
        assert rows[0] == [
            "variant",
            "resampler",
            "encoder_growth",
            "params",
            "reported",
            "deviation",
        ]
        assert [row[0] for row in rows[1:]] == list(REFERENCE_VARIANTS)
        assert all(abs(float(row[5])) < 0.05 for row in rows[1:])

    def test_layer_breakdown(self, tmp_path):
        output = tmp_path / "layers.csv"
        result = _invoke("params", *_sets(TINY_MODEL), "--output", output)
        assert result.exit_code == 0, result.output

        rows = _csv_rows(output)
        assert rows[0] == [
            "layer",
            "in_channels",
            "out_channels",
            "kernel",
            "params",
        ]
        assert [row[4] for row in rows[1:]] == ["8", "52", "26", "4", "90"]
        assert rows[-1][0] == "total"

    def test_csv_defaults_to_the_working_directory(
        self, tmp_path, monkeypatch
    ):
        monkeypatch.chdir(tmp_path)
        result = _invoke("params", *_sets(TINY_MODEL))
        assert result.exit_code == 0, result.output
        assert _csv_rows(tmp_path / "params.csv")[-1] == [
            "total",
            "",
            "",
            "",
            "90",
        ]


class TestDiagnose:
    def test_single_layer(self, tmp_path):
        output = tmp_path / "diagnostics.csv"
        result = _invoke(
            "diagnose", "--layer", "decimate", "--output", output
        )
        assert result.exit_code == 0, result.output

        rows = _csv_rows(output)
        assert len(rows) == 2
        assert rows[1][0] == "decimate_linear"
        assert float(rows[1][3]) == pytest.approx(1.0, abs=0.02)

    def test_haar_reconstructs(self, tmp_path):
        output = tmp_path / "diagnostics.csv"
        result = _invoke("diagnose", "--layer", "haar", "--output", output)
        assert result.exit_code == 0, result.output
        assert "dwt_haar" in result.output

        (row,) = _csv_rows(output)[1:]
        assert float(row[1]) < 1e-10

    def test_all_layers(self, tmp_path):
        output = tmp_path / "diagnostics.csv"
        result = _invoke("diagnose", "--output", output, "--length", 1024)
        assert result.exit_code == 0, result.output
        assert [row[0] for row in _csv_rows(output)[1:]] == [
            "dwt_haar",
            "dwt_lazy",
            "decimate_linear",
            "avgpool_linear",
            "squeeze",
        ]

    def test_csv_defaults_to_the_working_directory(
        self, tmp_path, monkeypatch
    ):
        monkeypatch.chdir(tmp_path)
        result = _invoke("diagnose", "--layer", "squeeze")
        assert result.exit_code == 0, result.output
        (row,) = _csv_rows(tmp_path / "diagnostics.csv")[1:]
        assert row[0] == "squeeze"

    def test_frequency_out_of_range(self):
        result = _invoke("diagnose", "--probe", "4.0")
        assert result.exit_code == 2
        assert "probe_freq" in result.output


def test_gradcheck():
    result = _invoke("gradcheck", "--seed", 5)
    assert result.exit_code == 0, result.output
    assert "Worst relative error" in result.output


def test_gradcheck_impossible_tolerance():
    result = _invoke("gradcheck", "--seed", 5, "--tolerance", 0)
    assert result.exit_code == 1
