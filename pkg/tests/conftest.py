"""
Shared fixtures for the textspot test suite.

Everything here builds a deliberately tiny model (16-wide, 6 proposals,
2 stages) on 64x64 synthetic images so the unit and integration tests run on
a CPU in seconds.
"""

import logging

import numpy as np
import pytest
import torch

from textspot.config import config_manager
from textspot.dataset import build_targets, collate_batch
from textspot.engine import build_dataset, train
from textspot.mask_codec import fit_basis
from textspot.models import TextInstance
from textspot.spotter import TextSpotter

TINY_OVERRIDES = {
    "backbone.embed_dim": 8,
    "backbone.depths": [1, 1, 1, 1],
    "backbone.num_heads": [1, 2, 2, 2],
    "backbone.d_model": 16,
    "detector.num_proposals": 6,
    "detector.hidden_dim": 16,
    "detector.num_stages": 2,
    "detector.dynamic_dim": 4,
    "detector.num_heads": 2,
    "detector.dim_feedforward": 32,
    "mask_codec.n_pca": 4,
    "rc.encoder_layers": 1,
    "recognizer.charset": "abc",
    "recognizer.max_length": 6,
    "recognizer.tlsam_depth": 1,
    "optimizer.max_iter": 1,
    "optimizer.batch_size": 2,
    "optimizer.log_period": 1,
    "optimizer.checkpoint_period": 1,
    "data.num_train_images": 2,
    "data.num_eval_images": 2,
    "data.synth.image_height": 64,
    "data.synth.image_width": 64,
    "data.synth.max_words": 2,
    "data.synth.min_font_size": 14,
    "data.synth.max_font_size": 18,
    "eval.parallel": False,
}

ENV_KEYS = ("TEXTSPOT_SEED", "TEXTSPOT_DEVICE", "TEXTSPOT_OUTPUT_DIR", "TEXTSPOT_DATA_ROOT")


def make_config(output_dir, **extra):
    overrides = dict(TINY_OVERRIDES)
    overrides.update(extra)
    return config_manager.create_config("toy", overrides, output_dir=str(output_dir))


def rectangle_masks(count, seed=0, resolution=28):
    """Random axis-aligned rectangles, each covering most of the grid."""
    rng = np.random.default_rng(seed)
    masks = np.zeros((count, resolution, resolution), dtype=np.float32)
    for m in masks:
        x0, y0 = rng.integers(0, 7, size=2)
        x1, y1 = rng.integers(resolution - 6, resolution + 1, size=2)
        m[y0:y1, x0:x1] = 1.0
    return masks


def square(x, y, size=20.0):
    return [x, y, x + size, y, x + size, y + size, x, y + size]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep TEXTSPOT_* variables from the developer's shell out of the tests."""
    for key in ENV_KEYS:
        monkeypatch.delenv(key, raising=False)


@pytest.fixture(autouse=True)
def reset_logging():
    """The CLI installs its own handler on the package logger; undo that so caplog keeps working."""
    yield
    logger = logging.getLogger("textspot")
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture
def tiny_config(tmp_path):
    return make_config(tmp_path / "runs")


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    model = TextSpotter(tiny_config)
    model.codec.load_basis(fit_basis(rectangle_masks(32), tiny_config.mask_codec.n_pca))
    return model.eval()


@pytest.fixture
def tiny_batch(tiny_config):
    dataset = build_dataset(tiny_config, "train")
    return collate_batch([dataset[0], dataset[1]])


@pytest.fixture
def hand_targets(tiny_model):
    """Two words on a 64x64 image, the second one do-not-care."""
    instances = [
        TextInstance(polygon=square(4, 4, 24), text="abc"),
        TextInstance(polygon=square(36, 36, 20), text="cab", care=False),
    ]
    return build_targets(instances, (64, 64), tiny_model.charset, 28, tiny_model.config.recognizer.max_length)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One-iteration training run shared by the engine, results and CLI tests."""
    root = tmp_path_factory.mktemp("trained")
    config = make_config(root / "runs")
    return train(config, progress=False)
