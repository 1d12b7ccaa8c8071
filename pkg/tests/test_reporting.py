"""
Tests for the HTML and text metric reports.
"""

from datetime import datetime

import pytest

from textspot.models import DetectionScores, MetricsReport
from textspot.reporting import HTMLReporter, _pct, render_text_report


@pytest.fixture
def report():
    return MetricsReport(
        detection=DetectionScores(P=0.8, R=0.5, H=0.6154),
        e2e_none=0.4,
        one_minus_ned=0.72,
        word_accuracy=0.35,
        num_images=4,
        num_gt=10,
        num_pred=7,
        stage_giou=[0.41, 0.63],
        dataset_path="data/toy/dataset.json",
        checkpoint="runs/x/checkpoints/last.pt",
        timestamp=datetime(2024, 5, 1, 12, 30, 0),
    )


def test_pct():
    assert _pct(0.5) == "50.0%"
    assert _pct(1.0) == "100.0%"
    assert _pct(None) == "n/a"


def test_html_report_generation(report, tmp_path):
    """Test that HTML report is generated."""
    path = tmp_path / "report.html"
    HTMLReporter().save_report(report, path)

    assert path.exists()
    content = path.read_text(encoding="utf-8")
    assert "Text spotting metrics" in content
    assert "data/toy/dataset.json" in content
    assert "runs/x/checkpoints/last.pt" in content
    assert "61.5%" in content
    assert "40.0%" in content
    assert "n/a" in content
    assert "0.6300" in content


def test_html_report_without_stages():
    content = HTMLReporter().generate_report(MetricsReport())
    assert "Mean matched gIoU per stage" not in content
    assert "<title>textspot metrics</title>" in content


def test_html_report_full_lexicon(report):
    report.e2e_full = 0.55
    content = HTMLReporter().generate_report(report)
    assert "55.0%" in content


def test_text_report(report):
    text = render_text_report(report)
    lines = text.splitlines()
    assert lines[0] == "# textspot evaluation report"
    assert "**Timestamp:** 2024-05-01 12:30:00" in lines
    assert "- **Detection:** P 80.0%, R 50.0%, H 61.5%" in lines
    assert "- **End-to-end (Full):** n/a" in lines
    assert "- **Predictions:** 7" in lines
    assert "- stage 2: 0.6300" in lines
    assert text.endswith("\n")
