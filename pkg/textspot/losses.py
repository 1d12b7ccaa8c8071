"""
Detection and recognition losses.
"""

import logging
from typing import Dict, Tuple

import torch
import torch.nn.functional as F
from torchvision.ops import sigmoid_focal_loss

from .geometry import giou
from .mask_codec import MaskCodec
from .matcher import Assignment
from .models import LossWeights

_logger = logging.getLogger(__name__)

DETECTION_TERMS = ("loss_cls", "loss_l1", "loss_giou", "loss_code", "loss_dice")


def focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0, reduction: str = "none"
) -> torch.Tensor:
    """Sigmoid focal loss ``-alpha_t (1 - p_t)^gamma log p_t``."""
    return sigmoid_focal_loss(logits, targets.to(logits.dtype), alpha=alpha, gamma=gamma, reduction=reduction)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft dice per mask over the last two dims, ``1 - 2 sum(pg) / (sum(p^2) + sum(g^2))``."""
    p = pred.flatten(-2)
    g = target.to(pred.dtype).flatten(-2)
    inter = (p * g).sum(-1)
    denom = (p * p).sum(-1) + (g * g).sum(-1)
    return 1.0 - (2 * inter + eps) / (denom + eps)


def detection_loss_stage(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    codes: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_codes: torch.Tensor,
    gt_masks: torch.Tensor,
    assignment: Assignment,
    weights: LossWeights,
    codec: MaskCodec,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Weighted detection loss of one stage on one image.

    Every proposal contributes a focal term (positive when matched, background
    otherwise). Matched proposals add L1, gIoU, code L2 and dice terms. All
    terms are normalized by ``max(1, num_gt)``.

    Returns:
        (weighted total, unweighted per-term breakdown)
    """
    num_gt = max(1, int(gt_boxes.shape[0]))
    targets = torch.zeros_like(logits)
    src = torch.as_tensor(assignment.proposal_indices, dtype=torch.long, device=logits.device)
    tgt = torch.as_tensor(assignment.gt_indices, dtype=torch.long, device=logits.device)
    if len(assignment):
        targets[src] = 1.0

    loss_cls = focal_loss(logits, targets, weights.focal_alpha, weights.focal_gamma, reduction="sum") / num_gt

    if len(assignment):
        pred_boxes = boxes[src]
        target_boxes = gt_boxes[tgt]
        loss_l1 = F.l1_loss(pred_boxes, target_boxes, reduction="sum") / num_gt
        loss_giou = (1.0 - giou(pred_boxes, target_boxes)).sum() / num_gt
        loss_code = F.mse_loss(codes[src], gt_codes[tgt], reduction="none").mean(-1).sum() / num_gt
        pred_masks = codec.decode(codes[src], clamp=True)
        loss_dice = dice_loss(pred_masks, gt_masks[tgt]).sum() / num_gt
    else:
        zero = logits.sum() * 0.0
        loss_l1 = loss_giou = loss_code = loss_dice = zero

    breakdown = {
        "loss_cls": loss_cls,
        "loss_l1": loss_l1,
        "loss_giou": loss_giou,
        "loss_code": loss_code,
        "loss_dice": loss_dice,
    }
    total = (
        weights.cls * loss_cls
        + weights.l1 * loss_l1
        + weights.giou * loss_giou
        + weights.mask * (loss_code + loss_dice)
    )
    return total, breakdown


def recognition_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over all ``n * T`` slots, padding included.

    Args:
        logits: ``(n, T, num_classes)``
        targets: ``(n, T)`` class indices, EOS then PAD after the text
    """
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits.flatten(0, 1), targets.flatten().long(), reduction="mean")
