"""
Tests for the scene-text evaluation metrics.
"""

import itertools

import editdistance
import numpy as np
import pytest
from pydantic import ValidationError

from conftest import square
from textspot.errors import MetricCalculationError
from textspot.metrics import (
    SpottingEvaluator,
    correct_with_lexicon,
    count_image,
    dataset_lexicon,
    detection_hmean,
    e2e_hmean,
    load_lexicon,
    match_image,
    normalized_edit_distance,
    one_minus_ned,
)
from textspot.models import DetectionScores, EvalConfig, MetricsReport, SpottingResult, TextInstance


def gt(x, y, text="abc", care=True):
    return TextInstance(polygon=square(x, y), text=text, care=care)


def pred(x, y, text="abc", confidence=0.9):
    return SpottingResult(polygon=square(x, y), text=text, confidence=confidence)


def test_perfect_predictions():
    gts = [gt(0, 0, "abc"), gt(50, 50, "cab")]
    preds = [pred(0, 0, "abc"), pred(50, 50, "cab")]
    scores = detection_hmean(preds, gts)
    assert (scores.P, scores.R, scores.H) == (1.0, 1.0, 1.0)
    assert e2e_hmean(preds, gts) == 1.0
    assert one_minus_ned(preds, gts) == 1.0


def test_no_predictions():
    scores = detection_hmean([], [gt(0, 0)])
    assert (scores.P, scores.R, scores.H) == (0.0, 0.0, 0.0)


def test_one_of_two_found():
    scores = detection_hmean([pred(0, 0)], [gt(0, 0), gt(50, 50)])
    assert scores.P == 1.0
    assert scores.R == 0.5
    assert scores.H == pytest.approx(2 / 3)


def test_duplicate_prediction_counts_once():
    scores = detection_hmean([pred(0, 0, confidence=0.9), pred(1, 1, confidence=0.8)], [gt(0, 0)])
    assert scores.P == 0.5
    assert scores.R == 1.0


def test_low_overlap_is_not_a_match():
    # IoU of two 20x20 squares offset by 10 is 1/3
    scores = detection_hmean([pred(10, 0)], [gt(0, 0)])
    assert scores.H == 0.0
    assert detection_hmean([pred(10, 0)], [gt(0, 0)], iou_threshold=0.3).H == 1.0


def test_do_not_care_ground_truth_is_ignored():
    gts = [gt(0, 0), gt(50, 50, "###", care=False)]
    preds = [pred(0, 0), pred(50, 50, "zzz")]
    match = match_image(preds, gts)
    assert match.pairs == [(0, 0)]
    assert match.ignored_preds == [1]
    counts = count_image(preds, gts)
    assert counts.num_gt == 1
    assert counts.num_pred == 1
    assert detection_hmean(preds, gts).H == 1.0
    assert one_minus_ned(preds, gts) == 1.0


def test_do_not_care_is_never_consumed():
    gts = [gt(0, 0, care=False)]
    preds = [pred(0, 0, confidence=0.9), pred(0, 0, confidence=0.5)]
    match = match_image(preds, gts)
    assert match.ignored_preds == [0, 1]
    assert match.unmatched_preds == []


def test_higher_confidence_matches_first():
    preds = [pred(2, 0, "low", confidence=0.3), pred(0, 0, "abc", confidence=0.95)]
    match = match_image(preds, [gt(0, 0)])
    assert match.pairs == [(1, 0)]
    assert match.unmatched_preds == [0]


def test_equal_confidence_keeps_input_order():
    preds = [pred(2, 0, "first"), pred(0, 0, "second")]
    match = match_image(preds, [gt(0, 0)])
    assert match.pairs == [(0, 0)]


def test_wrong_text_fails_end_to_end():
    gts = [gt(0, 0, "hello")]
    preds = [pred(0, 0, "world")]
    assert detection_hmean(preds, gts).H == 1.0
    assert e2e_hmean(preds, gts) == 0.0


def test_end_to_end_ignores_case():
    assert e2e_hmean([pred(0, 0, "HeLLo")], [gt(0, 0, "hello")]) == 1.0


def test_lexicon_corrects_prediction():
    assert correct_with_lexicon("hel1o", ["hello", "world"]) == "hello"
    gts = [gt(0, 0, "hello")]
    preds = [pred(0, 0, "hel1o")]
    assert e2e_hmean(preds, gts) == 0.0
    assert e2e_hmean(preds, gts, lexicon=["hello", "world"]) == 1.0


def test_lexicon_tie_goes_to_smallest_word():
    assert correct_with_lexicon("bat", ["cat", "hat", "bag"]) == "bag"


def test_empty_lexicon_is_an_error():
    with pytest.raises(MetricCalculationError):
        correct_with_lexicon("abc", [])
    with pytest.raises(MetricCalculationError):
        e2e_hmean([pred(0, 0)], [gt(0, 0)], lexicon=[])
    with pytest.raises(MetricCalculationError):
        SpottingEvaluator(lexicon=[])


def test_normalized_edit_distance():
    assert normalized_edit_distance("abc", "abd") == pytest.approx(1 / 3)
    assert normalized_edit_distance("", "") == 0.0
    assert normalized_edit_distance("", "ab") == 1.0
    assert normalized_edit_distance("ABC", "abc") == 0.0


def test_one_minus_ned_single_pair():
    assert one_minus_ned([pred(0, 0, "abc")], [gt(0, 0, "abd")]) == pytest.approx(2 / 3)


def test_one_minus_ned_unmatched_ground_truth():
    assert one_minus_ned([pred(0, 0)], [gt(0, 0), gt(50, 50)]) == pytest.approx(0.5)


def test_one_minus_ned_false_positive_policy():
    preds = [pred(0, 0), pred(50, 50)]
    gts = [gt(0, 0)]
    assert one_minus_ned(preds, gts) == pytest.approx(0.5)
    assert one_minus_ned(preds, gts, penalize_unmatched_preds=False) == 1.0


def test_one_minus_ned_empty_image():
    assert one_minus_ned([], []) == 0.0


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(0)
    words = ["".join(rng.choice(list("abcd"), size=rng.integers(0, 7))) for _ in range(12)]
    for a, b, c in itertools.permutations(words, 3):
        assert editdistance.eval(a, c) <= editdistance.eval(a, b) + editdistance.eval(b, c)


def test_e2e_never_exceeds_detection():
    rng = np.random.default_rng(3)
    for _ in range(30):
        gts = [gt(60 * i, 0, "".join(rng.choice(list("ab"), size=2))) for i in range(3)]
        preds = [
            pred(60 * i + int(rng.integers(0, 8)), 0, "".join(rng.choice(list("ab"), size=2)), float(rng.random()))
            for i in range(int(rng.integers(0, 5)))
        ]
        assert e2e_hmean(preds, gts) <= detection_hmean(preds, gts).H + 1e-12


def _split():
    gt_lists = [[gt(0, 0, "abc"), gt(50, 50, "cab")], [gt(0, 0, "bca")], []]
    pred_lists = [[pred(0, 0, "abc"), pred(50, 50, "cax")], [pred(0, 0, "bca"), pred(60, 60, "zz")], [pred(0, 0)]]
    return pred_lists, gt_lists


def test_evaluator_report():
    pred_lists, gt_lists = _split()
    report = SpottingEvaluator(EvalConfig(parallel=False)).evaluate(pred_lists, gt_lists, dataset_path="x.json")
    assert report.num_images == 3
    assert report.num_gt == 3
    assert report.num_pred == 5
    assert report.detection.P == pytest.approx(3 / 5)
    assert report.detection.R == 1.0
    assert report.e2e_none == pytest.approx(2 * (2 / 5) * (2 / 3) / (2 / 5 + 2 / 3))
    assert report.e2e_full is None
    assert report.word_accuracy == pytest.approx(2 / 3)
    # three matches, one at NED 1/3, two false positives
    assert report.one_minus_ned == pytest.approx(1 - (1 / 3 + 2) / 5)
    assert report.dataset_path == "x.json"


def test_evaluator_full_lexicon():
    pred_lists, gt_lists = _split()
    lexicon = dataset_lexicon(gt_lists)
    assert lexicon == ["abc", "bca", "cab"]
    report = SpottingEvaluator(EvalConfig(parallel=False), lexicon).evaluate(pred_lists, gt_lists)
    assert report.e2e_full == pytest.approx(report.detection.H)
    assert report.e2e_full >= report.e2e_none


def test_parallel_matches_serial():
    pred_lists, gt_lists = _split()
    serial = SpottingEvaluator(EvalConfig(parallel=False)).count(pred_lists, gt_lists)
    parallel = SpottingEvaluator(EvalConfig(parallel=True)).count(pred_lists, gt_lists)
    assert serial == parallel


def test_evaluator_rejects_length_mismatch():
    with pytest.raises(MetricCalculationError):
        SpottingEvaluator().count([[]], [[], []])


def test_dataset_lexicon_skips_do_not_care():
    assert dataset_lexicon([[gt(0, 0, "b"), gt(0, 0, "a", care=False)], [gt(0, 0, "b")]]) == ["b"]


def test_load_lexicon(tmp_path):
    path = tmp_path / "words.txt"
    path.write_text("world\n\nhello\nworld\n", encoding="utf-8")
    assert load_lexicon(path) == ["hello", "world"]


def test_load_lexicon_errors(tmp_path):
    with pytest.raises(MetricCalculationError):
        load_lexicon(tmp_path / "missing.txt")
    empty = tmp_path / "empty.txt"
    empty.write_text("\n\n", encoding="utf-8")
    with pytest.raises(MetricCalculationError) as exc_info:
        load_lexicon(empty)
    assert exc_info.value.context["metric_name"] == "e2e_full"


def test_report_rejects_e2e_above_detection():
    with pytest.raises(ValidationError):
        MetricsReport(detection=DetectionScores(P=0.5, R=0.5, H=0.5), e2e_none=0.8)
