"""
Bipartite matching between proposals and ground-truth instances.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import NumericalFaultError
from .geometry import pairwise_giou
from .models import LossWeights

_logger = logging.getLogger(__name__)


@dataclass
class Assignment:
    """One-to-one ``(proposal, gt)`` pairs; proposals not listed are background."""

    pairs: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def proposal_indices(self) -> List[int]:
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self) -> List[int]:
        return [g for _, g in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


def focal_class_cost(logits: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Positive-minus-negative focal cost per proposal, ``(N,)``."""
    prob = logits.sigmoid()
    neg_cost = (1 - alpha) * prob.pow(gamma) * (-torch.log(1 - prob + 1e-8))
    pos_cost = alpha * (1 - prob).pow(gamma) * (-torch.log(prob + 1e-8))
    return pos_cost - neg_cost


def cosine_cost(pred_codes: torch.Tensor, gt_codes: torch.Tensor) -> torch.Tensor:
    """``1 - cos`` between every predicted and ground-truth code; zero-norm codes cost 1."""
    pred_norm = pred_codes.norm(dim=-1, keepdim=True)
    gt_norm = gt_codes.norm(dim=-1, keepdim=True)
    degenerate = (pred_norm == 0).squeeze(-1)[:, None] | (gt_norm == 0).squeeze(-1)[None, :]
    if degenerate.any():
        _logger.warning("zero-norm mask code in cosine cost", extra={"count": int(degenerate.sum())})
    cos = (pred_codes / pred_norm.clamp(min=1e-12)) @ (gt_codes / gt_norm.clamp(min=1e-12)).T
    cos = cos.masked_fill(degenerate, 0.0)
    return 1.0 - cos


@torch.no_grad()
def match_cost_matrix(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    codes: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_codes: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """
    Matching cost between the N proposals of one image and its M ground truths.

    Args:
        logits: ``(N,)`` text logits
        boxes: ``(N, 4)`` predicted normalized cxcywh boxes
        codes: ``(N, n_pca)`` predicted mask codes
        gt_boxes: ``(M, 4)``
        gt_codes: ``(M, n_pca)`` encoded ground-truth masks
        weights: cost weights and focal parameters

    Returns:
        ``(N, M)`` cost matrix
    """
    cost_class = focal_class_cost(logits, weights.focal_alpha, weights.focal_gamma)[:, None]
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = 1.0 - pairwise_giou(boxes, gt_boxes)
    cost_mask = cosine_cost(codes, gt_codes)
    return (
        weights.cls * cost_class
        + weights.l1 * cost_l1
        + weights.giou * cost_giou
        + weights.mask * cost_mask
    )


def _solve(matrix: np.ndarray, allowed: np.ndarray, required: List[int], bonus: float) -> Tuple[np.ndarray, np.ndarray]:
    sub = matrix[allowed].copy()
    sub[np.isin(allowed, required)] -= bonus
    rows, cols = linear_sum_assignment(sub)
    return allowed[rows], cols


def _prefer_low_proposals(matrix: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Among the optimal assignments, pick the one whose proposal set is lexicographically smallest.

    Proposals are decided in index order: each one is kept if some optimal
    assignment contains it together with every proposal kept so far, and
    dropped otherwise. Subtracting ``bonus`` from the kept rows forces them in.
    """
    best = float(matrix[rows, cols].sum())
    k = len(rows)
    bonus = (float(np.ptp(matrix)) + 1.0) * (k + 1)
    tol = 1e-9 * max(1.0, abs(best))
    allowed = np.arange(matrix.shape[0])
    required: List[int] = []
    for i in range(matrix.shape[0]):
        if len(required) == k:
            break
        if i in rows:
            required.append(i)
            continue
        trial_rows, trial_cols = _solve(matrix, allowed, required + [i], bonus)
        if abs(float(matrix[trial_rows, trial_cols].sum()) - best) <= tol:
            rows, cols = trial_rows, trial_cols
            required.append(i)
        else:
            allowed = allowed[allowed != i]
    return rows, cols


def hungarian_assign(cost: torch.Tensor) -> Assignment:
    """
    Minimum-total-cost one-to-one assignment covering ``min(N, M)`` pairs.

    Ties between optimal assignments go to the lowest proposal indices.
    """
    matrix = cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else np.asarray(cost)
    if matrix.size and not np.isfinite(matrix).all():
        raise NumericalFaultError("cost matrix contains non-finite entries")
    if matrix.size == 0:
        return Assignment()
    matrix = matrix.astype(np.float64)
    rows, cols = linear_sum_assignment(matrix)
    if matrix.shape[0] > matrix.shape[1]:
        rows, cols = _prefer_low_proposals(matrix, rows, cols)
    return Assignment(pairs=sorted(zip(rows.tolist(), cols.tolist())))
