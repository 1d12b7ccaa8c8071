"""
Tests for the Recognition Conversion and its RoI pyramid.
"""

import pytest
import torch

from textspot.conversion import RecognitionConversion, recognition_rois, sine_position_encoding
from textspot.errors import ShapeError
from textspot.models import RCConfig

C = 16


def _conversion(**rc):
    torch.manual_seed(0)
    config = RCConfig(encoder_layers=1, encoder_heads=4, **rc)
    return RecognitionConversion(C, 16, config, pooled_size=7)


def _set_mask_bias(module, value):
    for head in module.mask_heads:
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.constant_(head.bias, value)


def test_recognition_rois_shapes():
    rois = recognition_rois(torch.randn(3, C, 28, 28))
    assert rois.a1.shape == (3, C, 28, 28)
    assert rois.a2.shape == (3, C, 14, 14)
    assert rois.a3.shape == (3, C, 7, 7)


def test_recognition_rois_average_pools():
    a1 = torch.arange(16.0).view(1, 1, 4, 4)
    rois = recognition_rois(a1)
    assert rois.a3.item() == pytest.approx(7.5)
    assert rois.a2[0, 0, 0, 0].item() == pytest.approx((0 + 1 + 4 + 5) / 4)


@pytest.mark.parametrize("shape", [(1, C, 28, 14), (1, C, 30, 30)])
def test_recognition_rois_rejects_bad_sides(shape):
    with pytest.raises(ShapeError):
        recognition_rois(torch.randn(*shape))


def test_sine_position_encoding_shape():
    pos = sine_position_encoding(7, 7, C)
    assert pos.shape == (49, C)
    assert pos.abs().max() <= 1.0
    with pytest.raises(ShapeError):
        sine_position_encoding(7, 7, 6)


def test_forward_shapes_and_mask_range():
    module = _conversion()
    out = module(torch.randn(2, C, 28, 28), torch.randn(2, 16))
    assert out.r1.shape == (2, C, 7, 7)
    assert out.r2.shape == (2, C, 14, 14)
    assert out.r3.shape == (2, C, 28, 28)
    m1, m2, m3 = out.masks
    assert m1.shape == (2, 1, 7, 7) and m2.shape == (2, 1, 14, 14) and m3.shape == (2, 1, 28, 28)
    for mask in out.masks:
        assert ((mask > 0) & (mask < 1)).all()
    assert out.f_det.shape == (2, C, 7, 7)


def test_half_masks_halve_a3():
    module = _conversion()
    _set_mask_bias(module, 0.0)
    a1 = torch.randn(2, C, 28, 28)
    out = module(a1, torch.randn(2, 16))
    assert torch.allclose(out.r1, recognition_rois(a1).a3 / 2)


def test_saturated_masks_equal_fusion_pyramid():
    module = _conversion()
    _set_mask_bias(module, 100.0)
    a1 = torch.randn(2, C, 28, 28)
    converted = module(a1, torch.randn(2, 16))
    fused = module.fusion_forward(recognition_rois(a1), torch.ones(2, 28, 28))
    assert torch.allclose(converted.r3, fused.r3, atol=1e-6)


def test_fuse_detection_feature_depends_on_proposal():
    module = _conversion()
    prop = torch.randn(2, 16, requires_grad=True)
    f_det = module.fuse_detection_feature(torch.randn(2, C, 7, 7), prop)
    assert f_det.shape == (2, C, 7, 7)
    f_det.sum().backward()
    assert prop.grad.norm() > 0


def test_recognition_gradient_reaches_proposal():
    module = _conversion()
    prop = torch.randn(2, 16, requires_grad=True)
    out = module(torch.randn(2, C, 28, 28), prop)
    out.f_det.retain_grad()
    out.r3.pow(2).mean().backward()
    assert out.f_det.grad.norm() > 0
    assert prop.grad.norm() > 0


def test_stop_gradient_cuts_proposal_gradient():
    module = _conversion(stop_gradient=True)
    prop = torch.randn(2, 16, requires_grad=True)
    a1 = torch.randn(2, C, 28, 28, requires_grad=True)
    module(a1, prop).r3.pow(2).mean().backward()
    assert prop.grad is None or torch.count_nonzero(prop.grad) == 0
    assert a1.grad.norm() > 0


def test_disabled_conversion_uses_decoded_mask():
    module = _conversion(enabled=False)
    prop = torch.randn(2, 16, requires_grad=True)
    mask_k = torch.zeros(2, 28, 28)
    mask_k[:, 7:21, 7:21] = 1.0
    out = module(torch.randn(2, C, 28, 28), prop, mask_k)
    assert out.masks is None
    assert torch.count_nonzero(out.r3[:, :, :7, :]) == 0
    out.r3.sum().backward()
    assert prop.grad is None


def test_disabled_conversion_requires_mask():
    module = _conversion(enabled=False)
    with pytest.raises(ShapeError):
        module(torch.randn(1, C, 28, 28), torch.randn(1, 16))


def test_rc_forward_rejects_mismatched_detection_feature():
    module = _conversion()
    rois = recognition_rois(torch.randn(1, C, 28, 28))
    with pytest.raises(ShapeError):
        module.rc_forward(rois, torch.randn(1, C, 14, 14))


def test_rc_forward_is_deterministic():
    module = _conversion().eval()
    rois = recognition_rois(torch.randn(2, C, 28, 28))
    f_det = torch.randn(2, C, 7, 7)
    assert torch.equal(module.rc_forward(rois, f_det).r3, module.rc_forward(rois, f_det).r3)


def test_rc_forward_gradients_match_finite_differences():
    module = _conversion().double().eval()
    rois = recognition_rois(torch.randn(1, C, 28, 28, dtype=torch.float64))
    f_det = torch.randn(1, C, 7, 7, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, C, 28, 28, dtype=torch.float64)
    assert torch.autograd.gradcheck(
        lambda f: (module.rc_forward(rois, f).r3 * weights).sum(), (f_det,), eps=1e-6, atol=1e-4
    )
