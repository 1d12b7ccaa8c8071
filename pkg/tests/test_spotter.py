"""
Tests for the assembled text spotter: forward pass, training losses and prediction.
"""

import math

import pytest
import torch

from conftest import make_config, rectangle_masks
from textspot.mask_codec import fit_basis
from textspot.models import SpottingResult
from textspot.spotter import TextSpotter

SIZES = torch.tensor([[64, 64]])


@pytest.fixture
def image():
    torch.manual_seed(7)
    return torch.rand(1, 3, 64, 64)


def _recognition_loss(model, image, targets):
    out = model(image, SIZES)
    assignments = model.match_stage(out.detection.final, [targets])
    return out, model.recognition_loss(out, [targets], assignments, SIZES)


def test_forward_shapes(tiny_model, image):
    out = tiny_model(image, SIZES)
    assert len(out.pyramid) == 4
    assert len(out.detection) == 2
    assert out.detection.final.boxes.shape == (1, 6, 4)
    assert out.detection.final.codes.shape == (1, 6, 4)


def test_match_stage_skips_do_not_care(tiny_model, image, hand_targets):
    out = tiny_model(image, SIZES)
    for stage in out.detection.stages:
        (assignment,) = tiny_model.match_stage(stage, [hand_targets])
        assert len(assignment) == 1
        assert assignment.gt_indices == [0]


def test_compute_losses_breakdown(tiny_model, image, hand_targets):
    total, breakdown = tiny_model.compute_losses(image, SIZES, [hand_targets])
    assert torch.isfinite(total)
    for stage in (1, 2):
        for term in ("loss_cls", "loss_l1", "loss_giou", "loss_code", "loss_dice"):
            assert f"s{stage}.{term}" in breakdown
    assert breakdown["loss_total"].item() == pytest.approx(
        breakdown["loss_det"].item() + tiny_model.config.loss.rec * breakdown["loss_rec"].item(), rel=1e-5
    )
    assert breakdown["loss_rec"].item() > 0


def test_compute_losses_on_synthetic_batch(tiny_model, tiny_batch):
    tiny_model.train()
    total, _ = tiny_model.compute_losses(tiny_batch.images, tiny_batch.image_sizes, tiny_batch.targets)
    total.backward()
    grads = [p.grad for p in tiny_model.parameters() if p.grad is not None]
    assert grads
    assert all(torch.isfinite(g).all() for g in grads)


def test_image_without_care_instances_has_no_recognition_loss(tiny_model, image, hand_targets):
    background = hand_targets.care_targets()
    background.care[:] = False
    _, loss = _recognition_loss(tiny_model, image, background)
    assert loss.item() == 0.0


def test_recognition_loss_reaches_final_proposal_features(tiny_model, image, hand_targets):
    out, loss = _recognition_loss(tiny_model, image, hand_targets)
    out.detection.final.features.retain_grad()
    loss.backward()
    assert out.detection.final.features.grad.norm() > 0
    assert tiny_model.detector.stages[-1].dynamic_conv.dynamic_layer.weight.grad.norm() > 0


def test_stop_gradient_blocks_recognition_loss_from_detector(tmp_path, image, hand_targets):
    config = make_config(tmp_path, **{"rc.stop_gradient": True})
    torch.manual_seed(0)
    model = TextSpotter(config)
    model.codec.load_basis(fit_basis(rectangle_masks(32), config.mask_codec.n_pca))
    out, loss = _recognition_loss(model, image, hand_targets)
    out.detection.final.features.retain_grad()
    loss.backward()
    grad = out.detection.final.features.grad
    assert grad is None or torch.count_nonzero(grad) == 0
    last = model.detector.stages[-1].dynamic_conv.dynamic_layer.weight.grad
    assert last is None or torch.count_nonzero(last) == 0
    assert model.recognizer.decoder.classifier.weight.grad.norm() > 0


def test_disabled_conversion_still_trains_recognizer(tmp_path, image, hand_targets):
    config = make_config(tmp_path, **{"rc.enabled": False})
    torch.manual_seed(0)
    model = TextSpotter(config)
    model.codec.load_basis(fit_basis(rectangle_masks(32), config.mask_codec.n_pca))
    _, loss = _recognition_loss(model, image, hand_targets)
    assert math.isfinite(loss.item())
    loss.backward()
    assert model.recognizer.decoder.classifier.weight.grad.norm() > 0


def test_predict_keeps_everything_at_zero_threshold(tiny_model, image):
    (results,) = tiny_model.predict(image, SIZES, score_threshold=0.0)
    assert len(results) == 6
    assert all(isinstance(r, SpottingResult) for r in results)
    confidences = [r.confidence for r in results]
    assert confidences == sorted(confidences, reverse=True)
    for r in results:
        assert len(r.polygon) >= 6 and len(r.polygon) % 2 == 0
        assert all(-1e-3 <= v <= 64.0 + 1e-3 for v in r.polygon)
        assert set(r.text) <= set("abc")
        assert r.attention is None


def test_predict_above_every_score_is_empty(tiny_model, image):
    assert tiny_model.predict(image, SIZES, score_threshold=1.01) == [[]]


def test_predict_attention_length_follows_text(tiny_model, image):
    (results,) = tiny_model.predict(image, SIZES, score_threshold=0.0, with_attention=True)
    max_length = tiny_model.config.recognizer.max_length
    for r in results:
        assert len(r.attention) == min(len(r.text) + 1, max_length)
        assert len(r.attention[0]) == 28 and len(r.attention[0][0]) == 28


def test_predict_polygon_nms_never_adds_results(tiny_model, image):
    (plain,) = tiny_model.predict(image, SIZES, score_threshold=0.0)
    (suppressed,) = tiny_model.predict(image, SIZES, score_threshold=0.0, use_polygon_nms=True)
    assert 1 <= len(suppressed) <= len(plain)
    assert suppressed[0].confidence == plain[0].confidence


def test_stage_matched_giou(tiny_model, image, hand_targets):
    values = tiny_model.stage_matched_giou(image, SIZES, [hand_targets])
    assert len(values) == 2
    assert all(-1.0 <= v <= 1.0 for v in values)
