"""
Tests for the command-line interface and its exit codes.
"""

import json

import numpy as np
import pytest
from PIL import Image

from conftest import TINY_OVERRIDES
from textspot.cli import create_parser, main
from textspot.errors import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, NumericalFaultError
from textspot.results import load_predictions
from textspot.spotter import TextSpotter


def tiny_args():
    args = []
    for key, value in TINY_OVERRIDES.items():
        args += ["--set", f"{key}={json.dumps(value)}"]
    return args


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_OK
    assert "usage: textspot" in capsys.readouterr().out


def test_version():
    with pytest.raises(SystemExit) as exc_info:
        main(["--version"])
    assert exc_info.value.code == 0


def test_bad_arguments_exit_with_usage_code():
    with pytest.raises(SystemExit) as exc_info:
        main(["train", "--bogus"])
    assert exc_info.value.code == EXIT_USAGE


def test_parser_defaults():
    args = create_parser().parse_args(["infer", "model.pt", "a.png"])
    assert args.out == "predictions.json"
    assert args.images == ["a.png"]
    assert not args.with_attention


def test_unknown_config_key_is_a_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "detector.num_queries=4"]) == EXIT_USAGE


def test_missing_training_data_is_a_data_error(tmp_path):
    code = main(["train", "--out", str(tmp_path), "--no-progress", *tiny_args(),
                 "--set", f"data.train_path={tmp_path / 'missing.json'}"])
    assert code == EXIT_DATA


def test_numerical_fault_exit_code(tmp_path, monkeypatch):
    def explode(self, images, image_sizes, targets):
        raise NumericalFaultError("non-finite activations", stage=2)

    monkeypatch.setattr(TextSpotter, "compute_losses", explode)
    assert main(["train", "--out", str(tmp_path), "--no-progress", *tiny_args()]) == EXIT_NUMERIC


def test_missing_checkpoint_is_a_data_error(tmp_path):
    assert main(["evaluate", str(tmp_path / "none.pt")]) == EXIT_DATA


def test_gen_data(tmp_path):
    out = tmp_path / "toy"
    code = main(["gen-data", "--out", str(out), "--num-images", "2", "--seed", "3",
                 "--set", "data.synth.image_height=64", "--set", "data.synth.image_width=64"])
    assert code == EXIT_OK
    records = json.loads((out / "dataset.json").read_text(encoding="utf-8"))
    assert len(records) == 2
    assert (out / records[0]["image"]).is_file()


@pytest.mark.integration
def test_train_command(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--no-progress", *tiny_args()]) == EXIT_OK
    runs = list(tmp_path.iterdir())
    assert len(runs) == 1
    assert (runs[0] / "checkpoints" / "last.pt").is_file()
    assert "Detection H" in capsys.readouterr().out


def test_evaluate_command(trained_run, tmp_path, capsys):
    out = tmp_path / "metrics.json"
    assert main(["evaluate", str(trained_run.checkpoint), "--out", str(out), "--polygon-nms"]) == EXIT_OK
    assert out.is_file()
    captured = capsys.readouterr()
    assert "E2E H (None)" in captured.out
    assert "Metrics written to" in captured.err


def test_infer_then_visualize(trained_run, tmp_path):
    image = tmp_path / "scene.png"
    Image.fromarray(np.full((64, 64, 3), 90, dtype=np.uint8)).save(image)
    preds = tmp_path / "preds.json"
    code = main(["infer", str(trained_run.checkpoint), str(image), str(tmp_path / "gone.png"),
                 "--out", str(preds), "--with-attention", "--score-threshold", "0"])
    assert code == EXIT_OK
    predictions = load_predictions(preds)
    assert len(predictions.images) == 2
    assert predictions.images[1].error

    overlays = tmp_path / "overlays"
    assert main(["visualize", str(preds), "--out", str(overlays), "--attention"]) == EXIT_OK
    assert (overlays / "0000_scene_overlay.png").is_file()
    assert not list(overlays.glob("0001_*"))


@pytest.mark.parametrize("command", [["evaluate", "m.pt"], ["infer", "m.pt", "a.png"]])
def test_seed_flag(command):
    parser = create_parser()
    assert parser.parse_args(command + ["--seed", "3"]).seed == 3
    assert parser.parse_args(command).seed is None


def test_evaluate_command_passes_seed(trained_run, tmp_path, monkeypatch):
    import textspot.engine as engine

    seeds = []
    monkeypatch.setattr(engine, "seed_everything", seeds.append)
    out = tmp_path / "metrics.json"
    assert main(["evaluate", str(trained_run.checkpoint), "--out", str(out), "--seed", "5"]) == EXIT_OK
    assert seeds == [5]
