"""Static SVG figures rendered from curve CSVs, no plotting dependency.

Each emitter is a pure function of one CSV's text, so a figure can always
be regenerated byte-for-byte from its source table.
"""

from __future__ import annotations

import csv
import io

from .errors import FormatError

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 440, 40, 320
TICKS = (0.0, 0.25, 0.5, 0.75, 1.0)

PALETTE = {
    "lstm": "#7f7f7f",
    "bilstm": "#1f77b4",
    "dkl-lstm": "#9467bd",
    "dkl": "#d62728",
}
FALLBACK_COLORS = ("#2ca02c", "#ff7f0e", "#8c564b", "#e377c2")


def _sx(v: float) -> float:
    return LEFT + v * (RIGHT - LEFT)


def _sy(v: float) -> float:
    return BOTTOM - v * (BOTTOM - TOP)


def _color(model: str, index: int) -> str:
    return PALETTE.get(model, FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def _read_rows(csv_text: str, required: tuple) -> list:
    reader = csv.DictReader(io.StringIO(csv_text))
    if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
        raise FormatError(f"curve CSV must have columns {required}, got {reader.fieldnames}")
    return list(reader)


def _frame(title: str, x_label: str, y_label: str) -> list:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{(LEFT + RIGHT) / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{RIGHT - LEFT}" height="{BOTTOM - TOP}" '
        f'fill="none" stroke="black"/>',
    ]
    for t in TICKS:
        x, y = _sx(t), _sy(t)
        parts.append(f'<line x1="{x:.1f}" y1="{BOTTOM}" x2="{x:.1f}" y2="{BOTTOM + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{BOTTOM + 18}" text-anchor="middle">{t:.2f}</text>')
        parts.append(f'<line x1="{LEFT - 5}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{LEFT - 8}" y="{y + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    parts.append(
        f'<text x="{(LEFT + RIGHT) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(TOP + BOTTOM) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(TOP + BOTTOM) / 2:.1f})">{y_label}</text>'
    )
    parts.append(
        f'<line x1="{_sx(0):.1f}" y1="{_sy(0):.1f}" x2="{_sx(1):.1f}" y2="{_sy(1):.1f}" '
        f'stroke="#999999" stroke-dasharray="5,4"/>'
    )
    return parts


def _legend(parts: list, models: list) -> None:
    for i, model in enumerate(models):
        y = BOTTOM - 14 - 16 * (len(models) - 1 - i)
        parts.append(
            f'<line x1="{RIGHT - 120}" y1="{y}" x2="{RIGHT - 95}" y2="{y}" '
            f'stroke="{_color(model, i)}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{RIGHT - 90}" y="{y + 4}">{model}</text>')


def _group_by_model(rows: list) -> dict:
    grouped: dict = {}
    for row in rows:
        grouped.setdefault(row["model"], []).append(row)
    return grouped


def roc_svg(csv_text: str) -> str:
    """ROC figure from a CSV with columns model,fpr,tpr."""
    grouped = _group_by_model(_read_rows(csv_text, ("model", "fpr", "tpr")))
    parts = _frame("Receiver operating characteristic", "False positive rate", "True positive rate")
    for i, (model, rows) in enumerate(grouped.items()):
        points = " ".join(f"{_sx(float(r['fpr'])):.2f},{_sy(float(r['tpr'])):.2f}" for r in rows)
        parts.append(f'<polyline points="{points}" fill="none" stroke="{_color(model, i)}" stroke-width="2"/>')
    _legend(parts, list(grouped))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def reliability_svg(csv_text: str) -> str:
    """Calibration figure from a CSV with per-bin mean prediction/frequency."""
    rows = _read_rows(csv_text, ("model", "bin_lo", "bin_hi", "count", "mean_predicted", "observed_frequency"))
    grouped = _group_by_model(rows)
    parts = _frame("Calibration curve", "Mean predicted probability", "Observed event frequency")
    for i, (model, mrows) in enumerate(grouped.items()):
        pts = [
            (float(r["mean_predicted"]), float(r["observed_frequency"]))
            for r in mrows
            if int(r["count"]) > 0 and r["mean_predicted"] != ""
        ]
        color = _color(model, i)
        points = " ".join(f"{_sx(x):.2f},{_sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{_sx(x):.2f}" cy="{_sy(y):.2f}" r="3" fill="{color}"/>')
    _legend(parts, list(grouped))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
