"""
Tests for boxes, polygons, rasterization and RoI sampling.
"""

import math

import numpy as np
import pytest
import shapely
import torch
from shapely.geometry import Polygon

from textspot.errors import GeometryError, ShapeError
from textspot.geometry import (
    apply_box_deltas,
    box_cxcywh_to_xyxy,
    box_xyxy_to_cxcywh,
    clip_boxes,
    giou,
    iou,
    mask_to_polygon,
    pairwise_giou,
    polygon_iou,
    polygon_nms,
    polygon_to_box,
    pyramid_level,
    rasterize_polygon,
    roi_extract,
)

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _random_boxes(count, seed=0):
    g = torch.Generator().manual_seed(seed)
    centers = torch.rand(count, 2, generator=g)
    sizes = torch.rand(count, 2, generator=g) * 0.5 + 0.05
    return torch.cat([centers, sizes], dim=1)


def _constant_pyramid(value, size=64, channels=3):
    return [torch.full((1, channels, size // s, size // s), value) for s in (4, 8, 16, 32)]


def test_giou_identical_boxes():
    """A box compared with itself scores one."""
    box = torch.tensor([0.5, 0.5, 0.2, 0.2])
    assert giou(box, box).item() == pytest.approx(1.0, abs=1e-5)


def test_giou_overlapping_corners():
    """(0,0,2,2) against (1,1,3,3): IoU 1/7 minus the 2/9 enclosure penalty."""
    a = torch.tensor([1.0, 1.0, 2.0, 2.0])
    b = torch.tensor([2.0, 2.0, 2.0, 2.0])
    assert giou(a, b).item() == pytest.approx(1 / 7 - 2 / 9, abs=1e-5)


def test_giou_disjoint_is_negative():
    a = torch.tensor([0.05, 0.05, 0.1, 0.1])
    b = torch.tensor([0.95, 0.95, 0.1, 0.1])
    assert giou(a, b).item() < 0


def test_giou_symmetric_and_bounded_by_iou():
    """gIoU is symmetric and never exceeds plain IoU."""
    a = _random_boxes(1000, seed=1)
    b = _random_boxes(1000, seed=2)
    assert torch.allclose(giou(a, b), giou(b, a), atol=1e-6)
    assert (giou(a, b) <= iou(a, b) + 1e-6).all()
    assert torch.allclose(giou(a, a), torch.ones(1000), atol=1e-4)


def test_giou_degenerate_box_raises():
    with pytest.raises(GeometryError):
        giou(torch.tensor([0.5, 0.5, 0.0, 0.2]), torch.tensor([0.5, 0.5, 0.2, 0.2]))


def test_giou_rejects_wrong_width():
    with pytest.raises(ShapeError):
        giou(torch.zeros(3), torch.zeros(3))


def test_pairwise_giou_matches_elementwise():
    a = _random_boxes(4, seed=3)
    b = _random_boxes(3, seed=4)
    matrix = pairwise_giou(a, b)
    assert matrix.shape == (4, 3)
    for i in range(4):
        for j in range(3):
            assert matrix[i, j].item() == pytest.approx(giou(a[i], b[j]).item(), abs=1e-4)


def test_giou_gradient():
    """Analytic gIoU gradients agree with finite differences in float64."""
    a = (_random_boxes(5, seed=5) * 0.5 + 0.25).double().requires_grad_(True)
    b = (_random_boxes(5, seed=6) * 0.5 + 0.25).double()
    assert torch.autograd.gradcheck(lambda x: giou(x, b), (a,), eps=1e-6, atol=1e-4)


def test_box_conversions_roundtrip():
    boxes = _random_boxes(10)
    assert torch.allclose(box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(boxes)), boxes, atol=1e-6)


def test_apply_box_deltas_identity():
    box = torch.tensor([[0.4, 0.6, 0.2, 0.3]])
    assert torch.allclose(apply_box_deltas(box, torch.zeros(1, 4)), box, atol=1e-6)


def test_apply_box_deltas_center_shift():
    box = torch.tensor([[0.4, 0.5, 0.2, 0.2]])
    out = apply_box_deltas(box, torch.tensor([[0.5, 0.0, 0.0, 0.0]]))
    assert out[0, 0].item() == pytest.approx(0.5, abs=1e-6)
    assert out[0, 1].item() == pytest.approx(0.5, abs=1e-6)


def test_apply_box_deltas_log_width():
    box = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    out = apply_box_deltas(box, torch.tensor([[0.0, 0.0, math.log(2.0), 0.0]]), clip=False)
    assert out[0, 2].item() == pytest.approx(0.4, abs=1e-6)


def test_apply_box_deltas_clips_to_unit_square():
    box = torch.tensor([[0.9, 0.9, 0.4, 0.4]])
    xyxy = box_cxcywh_to_xyxy(apply_box_deltas(box, torch.zeros(1, 4)))
    assert (xyxy >= -1e-6).all() and (xyxy <= 1 + 1e-6).all()


def test_apply_box_deltas_rejects_non_finite():
    with pytest.raises(GeometryError):
        apply_box_deltas(torch.tensor([[0.5, 0.5, 0.2, 0.2]]), torch.tensor([[float("nan"), 0.0, 0.0, 0.0]]))


def test_clip_boxes_keeps_widened_border_boxes_inside():
    boxes = torch.tensor([[1.0, 1.0, 0.0, 0.0], [0.0, 0.5, 1e-6, 0.3], [0.5, 0.5, 0.2, 0.2]])
    out = clip_boxes(boxes)
    assert (out[:, 2:] >= 1e-4 - 1e-9).all()
    xyxy = box_cxcywh_to_xyxy(out)
    assert (xyxy >= -1e-6).all() and (xyxy <= 1.0 + 1e-6).all()
    assert out[0, 0].item() == pytest.approx(1.0 - 5e-5, abs=1e-6)
    assert torch.allclose(out[2], boxes[2])


def test_polygon_to_box():
    points = np.array([[10.0, 20.0], [50.0, 20.0], [50.0, 60.0], [10.0, 60.0]])
    box = polygon_to_box(points, (100, 200))
    assert box == pytest.approx([30 / 200, 40 / 100, 40 / 200, 40 / 100])


def test_rasterize_polygon_equal_to_box_is_full():
    points = np.array([[20.0, 20.0], [80.0, 20.0], [80.0, 80.0], [20.0, 80.0]])
    box = polygon_to_box(points, (100, 100))
    mask = rasterize_polygon(points, box, (100, 100))
    assert mask.grid.shape == (28, 28)
    assert mask.grid.all()
    assert mask.valid


def test_rasterize_polygon_left_half():
    """A rectangle over the left half of the box fills the left 14 columns."""
    box = polygon_to_box(np.array([[20.0, 20.0], [80.0, 80.0]]), (100, 100))
    points = np.array([[20.0, 20.0], [50.0, 20.0], [50.0, 80.0], [20.0, 80.0]])
    grid = rasterize_polygon(points, box, (100, 100)).grid
    assert grid[:, :14].all()
    assert not grid[:, 14:].any()


def test_rasterize_polygon_triangle_fraction():
    """Foreground fraction agrees with a Monte-Carlo estimate of the covered area."""
    box = polygon_to_box(np.array([[20.0, 20.0], [80.0, 80.0]]), (100, 100))
    points = np.array([[20.0, 20.0], [80.0, 20.0], [20.0, 80.0]])
    grid = rasterize_polygon(points, box, (100, 100)).grid

    rng = np.random.default_rng(0)
    samples = rng.uniform(20.0, 80.0, size=(100_000, 2))
    expected = shapely.contains_xy(Polygon(points), samples[:, 0], samples[:, 1]).mean()
    assert grid.mean() == pytest.approx(expected, abs=0.05)
    assert grid.mean() == pytest.approx(0.5, abs=0.05)


def test_rasterize_polygon_outside_box_is_invalid():
    box = polygon_to_box(np.array([[0.0, 0.0], [20.0, 20.0]]), (100, 100))
    points = np.array([[60.0, 60.0], [90.0, 60.0], [90.0, 90.0], [60.0, 90.0]])
    mask = rasterize_polygon(points, box, (100, 100))
    assert not mask.valid
    assert not mask.grid.any()


def test_polygon_iou_cases():
    assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE) == pytest.approx(1.0)
    assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE + 5.0) == 0.0
    assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE + np.array([0.5, 0.0])) == pytest.approx(1 / 3)


def test_polygon_iou_symmetric():
    other = UNIT_SQUARE * 1.5 + 0.2
    assert polygon_iou(UNIT_SQUARE, other) == pytest.approx(polygon_iou(other, UNIT_SQUARE))


def test_polygon_iou_degenerate_scores_zero():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    assert polygon_iou(line, UNIT_SQUARE) == 0.0


@pytest.mark.parametrize("points", [[[0.0, 0.0], [1.0, 1.0]], [[0.5, 0.5]]])
def test_polygon_iou_too_few_points_scores_zero(points, caplog):
    short = np.array(points)
    assert polygon_iou(short, UNIT_SQUARE) == 0.0
    assert polygon_iou(UNIT_SQUARE, short) == 0.0
    assert "fewer than 3 points" in caplog.text


def test_pyramid_level_canonical_size():
    boxes = torch.tensor([[0.5, 0.5, 1.0, 1.0], [0.5, 0.5, 0.05, 0.05]])
    sizes = torch.tensor([[224.0, 224.0], [224.0, 224.0]])
    assert pyramid_level(boxes, sizes).tolist() == [2, 0]


def test_roi_extract_constant_pyramid():
    boxes = [torch.tensor([[0.5, 0.5, 0.5, 0.5], [0.3, 0.4, 0.2, 0.3]])]
    out, valid = roi_extract(_constant_pyramid(3.0), boxes, torch.tensor([[64, 64]]), (7, 7))
    assert out.shape == (2, 3, 7, 7)
    assert valid.all()
    assert torch.allclose(out, torch.full_like(out, 3.0), atol=1e-5)


def test_roi_extract_box_outside_image():
    boxes = [torch.tensor([[1.5, 0.5, 0.2, 0.2]])]
    out, valid = roi_extract(_constant_pyramid(3.0), boxes, torch.tensor([[64, 64]]), (7, 7))
    assert not valid[0]
    assert torch.count_nonzero(out) == 0


def test_roi_extract_keeps_box_order_across_images():
    pyramid = [torch.cat([torch.full((1, 2, 64 // s, 64 // s), 1.0), torch.full((1, 2, 64 // s, 64 // s), 2.0)])
               for s in (4, 8, 16, 32)]
    boxes = [torch.tensor([[0.5, 0.5, 0.4, 0.4]]), torch.tensor([[0.5, 0.5, 0.4, 0.4], [0.4, 0.4, 0.2, 0.2]])]
    out, _ = roi_extract(pyramid, boxes, torch.tensor([[64, 64], [64, 64]]), (4, 4))
    assert out.shape[0] == 3
    assert torch.allclose(out[0], torch.ones_like(out[0]))
    assert torch.allclose(out[1:], torch.full_like(out[1:], 2.0))


def test_roi_extract_requires_four_levels():
    with pytest.raises(ShapeError):
        roi_extract(_constant_pyramid(1.0)[:3], [torch.zeros(0, 4)], torch.tensor([[64, 64]]), (7, 7))


def test_roi_extract_gradient():
    """RoI sampling is differentiable in the features; checked against finite differences."""
    torch.manual_seed(0)
    rest = [torch.randn(1, 2, 32 // s, 32 // s, dtype=torch.float64) for s in (8, 16, 32)]
    level0 = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    boxes = [torch.tensor([[0.45, 0.55, 0.3, 0.25]], dtype=torch.float64)]
    sizes = torch.tensor([[32, 32]])

    def readout(x):
        return roi_extract([x] + rest, boxes, sizes, (4, 4))[0]

    assert torch.autograd.gradcheck(readout, (level0,), eps=1e-6, atol=1e-4)


def test_mask_to_polygon_full_mask_covers_box():
    box = [0.5, 0.5, 0.5, 0.5]
    polygon = mask_to_polygon(np.ones((28, 28)), box, (100, 100))
    assert len(polygon) >= 3
    assert polygon[:, 0].min() == pytest.approx(25.0, abs=2.0)
    assert polygon[:, 0].max() == pytest.approx(75.0, abs=2.0)


def test_mask_to_polygon_empty_mask_falls_back_to_box():
    polygon = mask_to_polygon(np.zeros((28, 28)), [0.5, 0.5, 0.2, 0.4], (100, 100))
    expected = np.array([[40.0, 30.0], [60.0, 30.0], [60.0, 70.0], [40.0, 70.0]])
    assert np.allclose(polygon, expected)


def test_polygon_nms_keeps_best_of_duplicates():
    keep = polygon_nms([UNIT_SQUARE, UNIT_SQUARE.copy(), UNIT_SQUARE + 3.0], [0.8, 0.9, 0.5], 0.5)
    assert keep == [1, 2]
