"""
HTML and plain-text metric reports for textspot.
"""

from pathlib import Path
from typing import Optional

from jinja2 import Template

from .models import MetricsReport

HTML_TEMPLATE = """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>textspot metrics{% if report.dataset_path %} - {{ report.dataset_path }}{% endif %}</title>
    <style>
        :root {
            --primary: #0f766e;
            --bg: #f8fafc;
            --card-bg: #ffffff;
            --text: #1e293b;
            --text-light: #64748b;
            --border: #e2e8f0;
        }

        body {
            font-family: -apple-system, BlinkMacSystemFont, "Segoe UI", Roboto, Helvetica, Arial, sans-serif;
            background-color: var(--bg);
            color: var(--text);
            line-height: 1.5;
            margin: 0;
            padding: 2rem;
        }

        .container { max-width: 1000px; margin: 0 auto; }

        .header, .card {
            background-color: var(--card-bg);
            padding: 1.5rem;
            border-radius: 0.5rem;
            box-shadow: 0 1px 3px rgba(0,0,0,0.1);
            margin-bottom: 1.5rem;
        }

        .header h1 { margin: 0; font-size: 1.5rem; }
        .meta { color: var(--text-light); font-size: 0.875rem; }

        .grid {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(200px, 1fr));
            gap: 1.5rem;
            margin-bottom: 1.5rem;
        }

        .card h2 {
            margin-top: 0;
            color: var(--text-light);
            text-transform: uppercase;
            letter-spacing: 0.05em;
            font-size: 0.75rem;
        }

        .stat-value { font-size: 2rem; font-weight: 700; color: var(--primary); }
        .stat-label { color: var(--text-light); font-size: 0.875rem; }

        table { width: 100%; border-collapse: collapse; }
        th, td { padding: 0.5rem 1rem; text-align: left; border-bottom: 1px solid var(--border); }
        th { background-color: #f1f5f9; font-size: 0.75rem; text-transform: uppercase; }
    </style>
</head>
<body>
    <div class="container">
        <div class="header">
            <h1>Text spotting metrics</h1>
            <div class="meta">
                {{ report.timestamp.strftime('%Y-%m-%d %H:%M:%S') }}
                {% if report.dataset_path %} &bull; dataset {{ report.dataset_path }}{% endif %}
                {% if report.checkpoint %} &bull; checkpoint {{ report.checkpoint }}{% endif %}
            </div>
        </div>

        <div class="grid">
            <div class="card">
                <h2>Detection H-mean</h2>
                <div class="stat-value">{{ pct(report.detection.H) }}</div>
                <div class="stat-label">P {{ pct(report.detection.P) }} &bull; R {{ pct(report.detection.R) }}</div>
            </div>
            <div class="card">
                <h2>End-to-end (None)</h2>
                <div class="stat-value">{{ pct(report.e2e_none) }}</div>
                <div class="stat-label">lexicon-free</div>
            </div>
            <div class="card">
                <h2>End-to-end (Full)</h2>
                <div class="stat-value">{{ pct(report.e2e_full) if report.e2e_full is not none else "n/a" }}</div>
                <div class="stat-label">with lexicon correction</div>
            </div>
            <div class="card">
                <h2>1-NED</h2>
                <div class="stat-value">{{ pct(report.one_minus_ned) }}</div>
                <div class="stat-label">word accuracy {{ pct(report.word_accuracy) }}</div>
            </div>
        </div>

        <div class="card">
            <h2>Counts</h2>
            <table>
                <tr><th>Images</th><th>Ground truths (care)</th><th>Predictions</th></tr>
                <tr><td>{{ report.num_images }}</td><td>{{ report.num_gt }}</td><td>{{ report.num_pred }}</td></tr>
            </table>
        </div>

        {% if report.stage_giou %}
        <div class="card">
            <h2>Mean matched gIoU per stage</h2>
            <table>
                <tr><th>Stage</th><th>gIoU</th></tr>
                {% for value in report.stage_giou %}
                <tr><td>{{ loop.index }}</td><td>{{ "%.4f"|format(value) }}</td></tr>
                {% endfor %}
            </table>
        </div>
        {% endif %}
    </div>
</body>
</html>
"""


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value * 100:.1f}%"


class HTMLReporter:
    """Generates HTML reports for metric reports."""

    def generate_report(self, report: MetricsReport) -> str:
        template = Template(HTML_TEMPLATE)
        return template.render(report=report, pct=_pct)

    def save_report(self, report: MetricsReport, output_path: Path) -> None:
        """
        Generate and save HTML report to file.

        Args:
            report: Metrics of one evaluated split
            output_path: Path to save HTML file
        """
        html_content = self.generate_report(report)

        with open(output_path, 'w', encoding='utf-8') as f:
            f.write(html_content)


def render_text_report(report: MetricsReport) -> str:
    lines = [
        "# textspot evaluation report",
        "",
        f"**Timestamp:** {report.timestamp.strftime('%Y-%m-%d %H:%M:%S')}",
    ]
    if report.dataset_path:
        lines.append(f"**Dataset:** {report.dataset_path}")
    if report.checkpoint:
        lines.append(f"**Checkpoint:** {report.checkpoint}")
    lines += [
        "",
        "## Metrics",
        "",
        f"- **Detection:** P {_pct(report.detection.P)}, R {_pct(report.detection.R)}, "
        f"H {_pct(report.detection.H)}",
        f"- **End-to-end (None):** {_pct(report.e2e_none)}",
        f"- **End-to-end (Full):** {_pct(report.e2e_full)}",
        f"- **1-NED:** {_pct(report.one_minus_ned)}",
        f"- **Word accuracy:** {_pct(report.word_accuracy)}",
        "",
        "## Counts",
        "",
        f"- **Images:** {report.num_images}",
        f"- **Ground truths (care):** {report.num_gt}",
        f"- **Predictions:** {report.num_pred}",
    ]
    if report.stage_giou:
        lines += ["", "## Mean matched gIoU per stage", ""]
        lines += [f"- stage {k}: {v:.4f}" for k, v in enumerate(report.stage_giou, 1)]
    return "\n".join(lines) + "\n"
