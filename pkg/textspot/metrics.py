"""
Scene-text evaluation metrics for textspot.

Provides polygon-IoU detection precision/recall/H-mean, end-to-end H-mean with
and without lexicon correction, 1-NED and word accuracy. Every metric shares one
greedy, confidence-ordered spatial matching per image, so the end-to-end score
can never exceed the detection score.
"""

import concurrent.futures
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import editdistance
import numpy as np

from .errors import MetricCalculationError
from .geometry import polygon_iou
from .models import DetectionScores, EvalConfig, MetricsReport, SpottingResult, TextInstance

_logger = logging.getLogger(__name__)


def _points(item: Union[SpottingResult, TextInstance]) -> np.ndarray:
    return np.asarray(item.polygon, dtype=np.float64).reshape(-1, 2)


def normalize_text(text: str) -> str:
    return text.lower()


def hmean(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class ImageMatch:
    """Greedy spatial matching of one image's predictions to its ground truths."""

    pairs: List[Tuple[int, int]] = field(default_factory=list)  # (pred index, gt index), care gts only
    ignored_preds: List[int] = field(default_factory=list)  # matched to do-not-care gts
    unmatched_preds: List[int] = field(default_factory=list)
    unmatched_gts: List[int] = field(default_factory=list)  # care gts only


def match_image(
    preds: Sequence[SpottingResult], gts: Sequence[TextInstance], iou_threshold: float = 0.5
) -> ImageMatch:
    """
    Match predictions to ground truths one-to-one in descending confidence.

    Equal confidences keep their input order. Each prediction takes the free
    ground truth of highest IoU at or above the threshold, lowest index on ties.
    Do-not-care ground truths are never consumed; a prediction landing on one
    is ignored rather than counted.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    gt_points = [_points(g) for g in gts]
    taken = [False] * len(gts)
    result = ImageMatch()

    for p in order:
        pred_points = _points(preds[p])
        best, best_iou = -1, -1.0
        for g, points in enumerate(gt_points):
            if taken[g]:
                continue
            value = polygon_iou(pred_points, points)
            if value >= iou_threshold and value > best_iou:
                best, best_iou = g, value
        if best < 0:
            result.unmatched_preds.append(p)
        elif not gts[best].care:
            result.ignored_preds.append(p)
        else:
            taken[best] = True
            result.pairs.append((p, best))

    result.unmatched_gts = [g for g, gt in enumerate(gts) if gt.care and not taken[g]]
    return result


def correct_with_lexicon(word: str, lexicon: Sequence[str]) -> str:
    """Closest lexicon word by edit distance; ties go to the lexicographically smallest."""
    if not lexicon:
        raise MetricCalculationError("lexicon is empty", metric_name="e2e_full")
    target = normalize_text(word)
    return min(lexicon, key=lambda w: (editdistance.eval(target, normalize_text(w)), w))


def normalized_edit_distance(pred: str, gt: str) -> float:
    pred, gt = normalize_text(pred), normalize_text(gt)
    longest = max(len(pred), len(gt))
    if longest == 0:
        return 0.0
    return editdistance.eval(pred, gt) / longest


@dataclass
class ImageCounts:
    """Per-image counters; dataset metrics are ratios of their sums."""

    num_gt: int = 0
    num_pred: int = 0
    det_tp: int = 0
    e2e_tp: int = 0
    e2e_full_tp: int = 0
    ned_sum: float = 0.0
    ned_count: int = 0

    def __add__(self, other: "ImageCounts") -> "ImageCounts":
        return ImageCounts(
            num_gt=self.num_gt + other.num_gt,
            num_pred=self.num_pred + other.num_pred,
            det_tp=self.det_tp + other.det_tp,
            e2e_tp=self.e2e_tp + other.e2e_tp,
            e2e_full_tp=self.e2e_full_tp + other.e2e_full_tp,
            ned_sum=self.ned_sum + other.ned_sum,
            ned_count=self.ned_count + other.ned_count,
        )


def count_image(
    preds: Sequence[SpottingResult],
    gts: Sequence[TextInstance],
    iou_threshold: float = 0.5,
    lexicon: Optional[Sequence[str]] = None,
    penalize_unmatched_preds: bool = True,
) -> ImageCounts:
    if lexicon is not None and not lexicon:
        raise MetricCalculationError("lexicon is empty", metric_name="e2e_full")
    match = match_image(preds, gts, iou_threshold)
    counts = ImageCounts(
        num_gt=sum(1 for g in gts if g.care),
        num_pred=len(preds) - len(match.ignored_preds),
        det_tp=len(match.pairs),
    )
    for p, g in match.pairs:
        text, truth = preds[p].text, gts[g].text
        if normalize_text(text) == normalize_text(truth):
            counts.e2e_tp += 1
        if lexicon is not None and normalize_text(correct_with_lexicon(text, lexicon)) == normalize_text(truth):
            counts.e2e_full_tp += 1
        counts.ned_sum += normalized_edit_distance(text, truth)
        counts.ned_count += 1

    counts.ned_sum += len(match.unmatched_gts)
    counts.ned_count += len(match.unmatched_gts)
    if penalize_unmatched_preds:
        counts.ned_sum += len(match.unmatched_preds)
        counts.ned_count += len(match.unmatched_preds)
    return counts


def detection_scores(counts: ImageCounts) -> DetectionScores:
    precision = _ratio(counts.det_tp, counts.num_pred)
    recall = _ratio(counts.det_tp, counts.num_gt)
    return DetectionScores(P=precision, R=recall, H=hmean(precision, recall))


def _e2e(tp: int, counts: ImageCounts) -> float:
    return hmean(_ratio(tp, counts.num_pred), _ratio(tp, counts.num_gt))


def _one_minus_ned(counts: ImageCounts) -> float:
    if counts.ned_count == 0:
        return 0.0
    return 1.0 - counts.ned_sum / counts.ned_count


def detection_hmean(
    preds: Sequence[SpottingResult], gts: Sequence[TextInstance], iou_threshold: float = 0.5
) -> DetectionScores:
    """Detection precision, recall and H-mean for one image."""
    return detection_scores(count_image(preds, gts, iou_threshold))


def e2e_hmean(
    preds: Sequence[SpottingResult],
    gts: Sequence[TextInstance],
    lexicon: Optional[Sequence[str]] = None,
    iou_threshold: float = 0.5,
) -> float:
    """
    End-to-end H-mean for one image.

    A match needs IoU at or above the threshold and a case-insensitive equal
    transcription. With a lexicon, each prediction is first replaced by its
    closest lexicon word.
    """
    counts = count_image(preds, gts, iou_threshold, lexicon)
    return _e2e(counts.e2e_full_tp if lexicon is not None else counts.e2e_tp, counts)


def one_minus_ned(
    preds: Sequence[SpottingResult],
    gts: Sequence[TextInstance],
    iou_threshold: float = 0.5,
    penalize_unmatched_preds: bool = True,
) -> float:
    """One minus the mean normalized edit distance over matched pairs and unmatched items."""
    return _one_minus_ned(count_image(preds, gts, iou_threshold, None, penalize_unmatched_preds))


def load_lexicon(path: Union[str, Path]) -> List[str]:
    """One word per line; blank lines are skipped."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            words = [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise MetricCalculationError(f"Cannot read lexicon {path}: {e}", metric_name="e2e_full")
    if not words:
        raise MetricCalculationError(f"Lexicon {path} is empty", metric_name="e2e_full")
    return sorted(set(words))


def dataset_lexicon(gt_lists: Sequence[Sequence[TextInstance]]) -> List[str]:
    """Every care transcription in the split: the Full lexicon."""
    return sorted({g.text for gts in gt_lists for g in gts if g.care and g.text})


class SpottingEvaluator:
    """Scores a split of per-image predictions against ground truth."""

    def __init__(self, config: Optional[EvalConfig] = None, lexicon: Optional[Sequence[str]] = None):
        self.config = config or EvalConfig()
        self.lexicon = list(lexicon) if lexicon is not None else None
        if self.lexicon is not None and not self.lexicon:
            raise MetricCalculationError("lexicon is empty", metric_name="e2e_full")

    def _count(self, preds: Sequence[SpottingResult], gts: Sequence[TextInstance]) -> ImageCounts:
        return count_image(
            preds, gts, self.config.iou_threshold, self.lexicon, self.config.ned_penalize_unmatched_preds
        )

    def count(
        self, pred_lists: Sequence[Sequence[SpottingResult]], gt_lists: Sequence[Sequence[TextInstance]]
    ) -> ImageCounts:
        if len(pred_lists) != len(gt_lists):
            raise MetricCalculationError(
                f"{len(pred_lists)} prediction lists for {len(gt_lists)} images", metric_name="evaluate"
            )
        per_image: Dict[int, ImageCounts] = {}
        if self.config.parallel and len(gt_lists) > 1:
            max_workers = min(len(gt_lists), 8)
            with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
                future_to_index = {
                    executor.submit(self._count, preds, gts): i
                    for i, (preds, gts) in enumerate(zip(pred_lists, gt_lists))
                }
                for future in concurrent.futures.as_completed(future_to_index):
                    per_image[future_to_index[future]] = future.result()
        else:
            for i, (preds, gts) in enumerate(zip(pred_lists, gt_lists)):
                per_image[i] = self._count(preds, gts)

        total = ImageCounts()
        for i in sorted(per_image):
            total = total + per_image[i]
        return total

    def evaluate(
        self,
        pred_lists: Sequence[Sequence[SpottingResult]],
        gt_lists: Sequence[Sequence[TextInstance]],
        **report_fields,
    ) -> MetricsReport:
        counts = self.count(pred_lists, gt_lists)
        report = MetricsReport(
            detection=detection_scores(counts),
            e2e_none=_e2e(counts.e2e_tp, counts),
            e2e_full=_e2e(counts.e2e_full_tp, counts) if self.lexicon is not None else None,
            one_minus_ned=_one_minus_ned(counts),
            word_accuracy=_ratio(counts.e2e_tp, counts.num_gt),
            num_images=len(gt_lists),
            num_gt=counts.num_gt,
            num_pred=counts.num_pred,
            **report_fields,
        )
        _logger.info(
            "evaluated split",
            extra={"images": report.num_images, "det_h": report.detection.H, "e2e_none": report.e2e_none},
        )
        return report
