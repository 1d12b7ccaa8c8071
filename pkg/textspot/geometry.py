"""
Geometry shared by the detector, the losses and the metrics.

Boxes are normalized ``(cx, cy, w, h)`` relative to the image extent. Polygons
are ``(K, 2)`` arrays in absolute pixels.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import cv2
import numpy as np
import shapely
import torch
from shapely.geometry import Polygon as ShapelyPolygon
from torchvision.ops import generalized_box_iou, generalized_box_iou_loss, roi_align

from .errors import GeometryError, ShapeError

_logger = logging.getLogger(__name__)

MASK_SIZE = 28
PYRAMID_STRIDES = (4, 8, 16, 32)
# Canonical FPN level assignment: a 224px box maps to the stride-16 level.
CANONICAL_SIZE = 224.0
# Upper bound on log-size deltas, as in common two-stage box coders.
SCALE_CLAMP = math.log(1000.0 / 16)
MIN_BOX_SIZE = 1e-4


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _check_boxes(boxes: torch.Tensor, operation: str) -> None:
    if boxes.shape[-1] != 4:
        raise ShapeError("boxes must have 4 coordinates", component=operation, actual=tuple(boxes.shape))
    if boxes.numel() and (boxes[..., 2:] <= 0).any():
        raise GeometryError("degenerate box with non-positive width or height", operation=operation)


def giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise generalized IoU of two broadcast-compatible ``(..., 4)`` cxcywh tensors."""
    _check_boxes(a, "giou")
    _check_boxes(b, "giou")
    a, b = torch.broadcast_tensors(a, b)
    if a.numel() == 0:
        return a.new_zeros(a.shape[:-1])
    loss = generalized_box_iou_loss(
        box_cxcywh_to_xyxy(a).reshape(-1, 4), box_cxcywh_to_xyxy(b).reshape(-1, 4), reduction="none"
    )
    return (1.0 - loss).reshape(a.shape[:-1])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(N, 4) x (M, 4) -> (N, M)`` generalized IoU for cxcywh boxes."""
    _check_boxes(a, "pairwise_giou")
    _check_boxes(b, "pairwise_giou")
    return generalized_box_iou(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))


def iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise plain IoU of cxcywh boxes."""
    a, b = torch.broadcast_tensors(a, b)
    ax = box_cxcywh_to_xyxy(a)
    bx = box_cxcywh_to_xyxy(b)
    lt = torch.maximum(ax[..., :2], bx[..., :2])
    rb = torch.minimum(ax[..., 2:], bx[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def apply_box_deltas(boxes: torch.Tensor, deltas: torch.Tensor, clip: bool = True) -> torch.Tensor:
    """Refine cxcywh boxes by center-offset / log-size deltas.

    ``cx += dx * w``, ``cy += dy * h``, ``w *= exp(dw)``, ``h *= exp(dh)``.
    """
    if not torch.isfinite(deltas).all():
        raise GeometryError("box deltas must be finite", operation="apply_box_deltas")
    cx, cy, w, h = boxes.unbind(-1)
    dx, dy, dw, dh = deltas.unbind(-1)
    dw = dw.clamp(max=SCALE_CLAMP)
    dh = dh.clamp(max=SCALE_CLAMP)
    out = torch.stack([cx + dx * w, cy + dy * h, w * torch.exp(dw), h * torch.exp(dh)], dim=-1)
    if clip:
        out = clip_boxes(out)
    return out


def clip_boxes(boxes: torch.Tensor) -> torch.Tensor:
    """Clip cxcywh boxes to the unit square, keeping a minimum extent inside it."""
    xyxy = box_cxcywh_to_xyxy(boxes).clamp(0.0, 1.0)
    out = box_xyxy_to_cxcywh(xyxy)
    size = out[..., 2:].clamp(min=MIN_BOX_SIZE)
    # widened boxes at the border slide back inside
    center = torch.minimum(torch.maximum(out[..., :2], size / 2), 1.0 - size / 2)
    return torch.cat([center, size], dim=-1)


def polygon_to_box(points: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    """Axis-aligned normalized cxcywh box of a polygon. ``image_size`` is ``(height, width)``."""
    height, width = image_size
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    x0, x1 = np.clip([x0, x1], 0, width)
    y0, y1 = np.clip([y0, y1], 0, height)
    return np.array(
        [(x0 + x1) / 2 / width, (y0 + y1) / 2 / height, max(x1 - x0, 1e-3) / width, max(y1 - y0, 1e-3) / height],
        dtype=np.float32,
    )


@dataclass(frozen=True)
class BinaryMask:
    """A ``MASK_SIZE x MASK_SIZE`` instance mask in box-normalized coordinates."""

    grid: np.ndarray

    @property
    def valid(self) -> bool:
        return bool(self.grid.any())


def rasterize_polygon(
    points: np.ndarray,
    box: Sequence[float],
    image_size: Tuple[int, int],
    resolution: int = MASK_SIZE,
) -> BinaryMask:
    """Rasterize a polygon clipped to ``box``; a cell is foreground when its center lies inside."""
    height, width = image_size
    cx, cy, w, h = (float(v) for v in box)
    x0 = (cx - w / 2) * width
    y0 = (cy - h / 2) * height
    cell_w = w * width / resolution
    cell_h = h * height / resolution

    centers = (np.arange(resolution) + 0.5)
    xs = x0 + centers * cell_w
    ys = y0 + centers * cell_h
    grid_x, grid_y = np.meshgrid(xs, ys)

    polygon = ShapelyPolygon(points)
    if not polygon.is_valid:
        polygon = polygon.buffer(0)
    inside = shapely.contains_xy(polygon, grid_x, grid_y)
    mask = BinaryMask(inside.astype(np.uint8))
    if not mask.valid:
        _logger.warning("polygon does not intersect its box; mask flagged invalid")
    return mask


def polygon_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two polygons given as ``(K, 2)`` arrays."""
    if len(a) < 3 or len(b) < 3:
        _logger.warning("polygon with fewer than 3 points in IoU; scoring 0")
        return 0.0
    pa = ShapelyPolygon(a)
    pb = ShapelyPolygon(b)
    if pa.area <= 0 or pb.area <= 0:
        _logger.warning("degenerate polygon in IoU; scoring 0")
        return 0.0
    if not pa.is_valid:
        pa = pa.buffer(0)
    if not pb.is_valid:
        pb = pb.buffer(0)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    if union <= 0:
        return 0.0
    return float(inter / union)


def pyramid_level(boxes: torch.Tensor, image_sizes: torch.Tensor) -> torch.Tensor:
    """FPN level index (0 for stride 4 ... 3 for stride 32) for absolute-scale box areas."""
    scale = torch.sqrt(boxes[:, 2] * boxes[:, 3] * image_sizes[:, 0] * image_sizes[:, 1])
    level = torch.floor(2 + torch.log2(scale / CANONICAL_SIZE + 1e-8))
    return level.clamp(0, len(PYRAMID_STRIDES) - 1).to(torch.int64)


def roi_extract(
    pyramid: Sequence[torch.Tensor],
    boxes: List[torch.Tensor],
    image_sizes: torch.Tensor,
    out_size: Tuple[int, int],
    sampling_ratio: int = 2,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Bilinear RoI features from the pyramid level chosen by box scale.

    Args:
        pyramid: levels at strides 4, 8, 16, 32, each ``(B, C, H_l, W_l)``.
        boxes: per-image ``(n_i, 4)`` normalized cxcywh boxes.
        image_sizes: ``(B, 2)`` tensor of ``(height, width)`` per image.
        out_size: ``(out_h, out_w)``.

    Returns:
        ``(sum n_i, C, out_h, out_w)`` features and a ``(sum n_i,)`` validity flag;
        boxes lying fully outside their image yield zero features flagged invalid.
    """
    if len(pyramid) != len(PYRAMID_STRIDES):
        raise ShapeError("pyramid must have 4 levels", component="roi_extract",
                         expected=len(PYRAMID_STRIDES), actual=len(pyramid))
    channels = pyramid[0].shape[1]
    device = pyramid[0].device
    dtype = pyramid[0].dtype
    counts = [int(b.shape[0]) for b in boxes]
    total = sum(counts)
    out = pyramid[0].new_zeros((total, channels, out_size[0], out_size[1]))
    if total == 0:
        return out, torch.zeros(0, dtype=torch.bool, device=device)

    all_boxes = torch.cat(boxes, dim=0).to(dtype)
    batch_idx = torch.cat([torch.full((n,), i, device=device, dtype=dtype) for i, n in enumerate(counts)])
    sizes = image_sizes.to(device=device, dtype=dtype)[batch_idx.long()]

    xyxy = box_cxcywh_to_xyxy(all_boxes)
    valid = (xyxy[:, 2] > 0) & (xyxy[:, 0] < 1) & (xyxy[:, 3] > 0) & (xyxy[:, 1] < 1)
    abs_xyxy = xyxy * torch.stack([sizes[:, 1], sizes[:, 0], sizes[:, 1], sizes[:, 0]], dim=-1)
    rois = torch.cat([batch_idx[:, None], abs_xyxy], dim=1)
    levels = pyramid_level(all_boxes, sizes)

    pieces = []
    for level, (feature, stride) in enumerate(zip(pyramid, PYRAMID_STRIDES)):
        idx = torch.nonzero(levels == level, as_tuple=False).squeeze(1)
        if idx.numel() == 0:
            continue
        pooled = roi_align(
            feature, rois[idx], output_size=out_size, spatial_scale=1.0 / stride,
            sampling_ratio=sampling_ratio, aligned=True,
        )
        pieces.append((idx, pooled))
    for idx, pooled in pieces:
        out = out.index_copy(0, idx, pooled)
    out = out * valid[:, None, None, None].to(dtype)
    return out, valid


def mask_to_polygon(
    mask: np.ndarray,
    box: Sequence[float],
    image_size: Tuple[int, int],
    threshold: float = 0.5,
) -> np.ndarray:
    """Map a soft box-normalized mask back to an image-space polygon.

    Uses the largest external contour of the thresholded mask; falls back to the
    box rectangle when the contour has fewer than three points.
    """
    height, width = image_size
    cx, cy, w, h = (float(v) for v in box)
    x0 = (cx - w / 2) * width
    y0 = (cy - h / 2) * height
    bw = w * width
    bh = h * height
    resolution = mask.shape[0]

    binary = (mask >= threshold).astype(np.uint8)
    contours, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    if contours:
        contour = max(contours, key=cv2.contourArea).reshape(-1, 2).astype(np.float64)
        if len(contour) >= 3 and cv2.contourArea(contour.astype(np.float32)) > 0:
            xs = x0 + (contour[:, 0] + 0.5) / resolution * bw
            ys = y0 + (contour[:, 1] + 0.5) / resolution * bh
            return np.stack([np.clip(xs, 0, width), np.clip(ys, 0, height)], axis=1)

    return box_to_polygon(box, image_size)


def polygon_nms(polygons: List[np.ndarray], scores: Sequence[float], iou_threshold: float) -> List[int]:
    """Greedy polygon NMS; returns kept indices in descending score order."""
    order = sorted(range(len(polygons)), key=lambda i: (-scores[i], i))
    keep: List[int] = []
    for i in order:
        if all(polygon_iou(polygons[i], polygons[j]) < iou_threshold for j in keep):
            keep.append(i)
    return keep


def box_to_polygon(box: Sequence[float], image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    cx, cy, w, h = (float(v) for v in box)
    x0, y0 = (cx - w / 2) * width, (cy - h / 2) * height
    x1, y1 = (cx + w / 2) * width, (cy + h / 2) * height
    x0, x1 = np.clip([x0, x1], 0, width)
    y0, y1 = np.clip([y0, y1], 0, height)
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)

