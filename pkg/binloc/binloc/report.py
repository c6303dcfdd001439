"""Report generation module"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd
from jinja2 import Template

from .utils.logger import setup_logger

logger = setup_logger(__name__)

FLOAT_FORMAT = '%.10g'

_HTML_TEMPLATE = Template("""<!DOCTYPE html>
<html>
<head>
    <title>Binaural Localization Report</title>
    <style>
        body { font-family: Arial, sans-serif; margin: 40px; }
        h1, h2 { color: #333; }
        .section { margin: 20px 0; padding: 20px; border: 1px solid #ddd; border-radius: 5px; }
        table { border-collapse: collapse; }
        td, th { padding: 4px 10px; border-bottom: 1px solid #eee; text-align: right; }
        .outlier { color: #d32f2f; }
    </style>
</head>
<body>
    <h1>Binaural Localization Report</h1>
    <p>Generated on: {{ generated }}</p>

    <div class="section">
        <h2>Summary</h2>
        <p>Sources per item: {{ summary.num_sources }} &middot; items: {{ summary.items }}
           &middot; outlier threshold: {{ summary.threshold }}&deg;</p>
        <table>
            <tr><th>Method</th><th>Azimuth mean</th><th>Azimuth std</th>
                <th>Elevation mean</th><th>Elevation std</th><th>Outliers %</th><th>Mean GTEA</th></tr>
            {% for name, m in summary.methods.items() %}
            <tr>
                <td>{{ name }}</td>
                <td>{{ fmt(m.azimuth.mean) }}</td><td>{{ fmt(m.azimuth.std) }}</td>
                <td>{{ fmt(m.elevation.mean) }}</td><td>{{ fmt(m.elevation.std) }}</td>
                <td>{{ fmt(m.outlier_percent) }}</td><td>{{ fmt(m.mean_gtea) }}</td>
            </tr>
            {% endfor %}
        </table>
        {% if summary.failed %}<p class="outlier">Failed items: {{ summary.failed | join(', ') }}</p>{% endif %}
    </div>

    <div class="section">
        <h2>Items</h2>
        <table>
            <tr>{% for column in columns %}<th>{{ column }}</th>{% endfor %}</tr>
            {% for row in rows %}
            <tr class="{{ 'outlier' if row.outlier else '' }}">
                {% for column in columns %}<td>{{ fmt(row[column]) }}</td>{% endfor %}
            </tr>
            {% endfor %}
        </table>
    </div>
</body>
</html>
""")


def _fmt(value: Any) -> str:
    if value is None:
        return '-'
    if isinstance(value, float):
        return '-' if value != value else f"{value:.2f}"
    return str(value)


def write_json(data: Dict[str, Any], path: Path) -> Path:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote {path}")
    return path


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write frame to path as CSV with a fixed float format"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def meta_path(path: Path) -> Path:
    """Sidecar metadata path next to a result file"""
    path = Path(path)
    return path.with_name(path.name + '.meta.json')


def timing_path(path: Path) -> Path:
    """Timing side-channel path next to a result file"""
    path = Path(path)
    return path.with_name(path.stem + '.timing.csv')


def write_meta(path: Path, elapsed_ms: Optional[float] = None, **extra: Any) -> Path:
    """Side-channel metadata for a content file: wall-clock time and timings"""
    meta = {'generated': datetime.now().isoformat(), **extra}
    if elapsed_ms is not None:
        meta['elapsed_ms'] = elapsed_ms
    target = meta_path(path)
    target.write_text(json.dumps(meta, indent=2, sort_keys=True) + '\n')
    return target


def generate_html_report(summary: Dict[str, Any], results: pd.DataFrame, output_path: Path) -> Path:
    """Render the evaluation summary and the per-item table as HTML"""
    logger.info(f"Generating HTML report at {output_path}")
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    threshold = summary.get('threshold') or float('inf')
    columns = [c for c in results.columns if c != 'outlier']
    rows = []
    for record in results.to_dict(orient='records'):
        errors = [v for k, v in record.items() if k.startswith('err_') and v == v]
        record['outlier'] = sum(e * e for e in errors) ** 0.5 > threshold if errors else False
        rows.append(record)

    html = _HTML_TEMPLATE.render(
        generated=datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
        summary=summary,
        columns=columns,
        rows=rows,
        fmt=_fmt,
    )
    output_path.write_text(html)
    logger.info(f"HTML report generated at {output_path}")
    return output_path
