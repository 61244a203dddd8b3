"""Deterministic SVG learning-curve rendering from metric CSV files.

No plotting library: charts are assembled from f-strings with fixed float
formatting so identical inputs produce identical bytes.
"""

import csv
import os

from .training import CSV_HEADER

WIDTH, HEIGHT = 720, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 40, 45


class ChartError(ValueError):
    pass


def _read_rows(csv_paths):
    rows = []
    for path in csv_paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            for lineno, row in enumerate(reader, start=1):
                if lineno == 1 and row == list(CSV_HEADER):
                    continue
                if len(row) != len(CSV_HEADER):
                    raise ChartError(
                        f"{path}: row {lineno}: expected {len(CSV_HEADER)} fields, "
                        f"got {len(row)}"
                    )
                try:
                    slot = int(row[4])
                    epoch = int(row[5])
                    score = float(row[8])
                except ValueError:
                    raise ChartError(f"{path}: row {lineno}: non-numeric field")
                if not 0.0 <= score <= 100.0:
                    raise ChartError(
                        f"{path}: row {lineno}: score {score} outside [0, 100]"
                    )
                rows.append(
                    {
                        "run_id": row[0],
                        "slot": slot,
                        "epoch": epoch,
                        "eval_task": row[6],
                        "score": score,
                    }
                )
    return rows


def _scale_x(i, n):
    span = WIDTH - MARGIN_L - MARGIN_R
    if n == 1:
        return MARGIN_L + span / 2
    return MARGIN_L + span * (i / (n - 1))


def _scale_y(score):
    span = HEIGHT - MARGIN_T - MARGIN_B
    return MARGIN_T + span * (1.0 - score / 100.0)


def _render_one(run_id, eval_task, points, boundaries):
    n = len(points)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{run_id} / {eval_task}</text>',
    ]
    for level in (0, 25, 50, 75, 100):
        y = _scale_y(level)
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{y:.2f}" x2="{WIDTH - MARGIN_R}" y2="{y:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{level}</text>'
        )
    for b in boundaries:
        # boundary sits between the last epoch of one task and the first of the next
        x = (_scale_x(b - 1, n) + _scale_x(b, n)) / 2
        parts.append(
            f'<line x1="{x:.2f}" y1="{MARGIN_T}" x2="{x:.2f}" '
            f'y2="{HEIGHT - MARGIN_B}" stroke="#888888" stroke-width="1" '
            f'stroke-dasharray="4 3"/>'
        )
    coords = " ".join(
        f"{_scale_x(i, n):.2f},{_scale_y(score):.2f}" for i, score in enumerate(points)
    )
    parts.append(
        f'<polyline points="{coords}" fill="none" stroke="#1f6fb2" stroke-width="2"/>'
    )
    parts.append(
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) / 2:.2f}" y="{HEIGHT - 12}" '
        f'text-anchor="middle" font-family="sans-serif" font-size="12">'
        f"epoch (global across tasks)</text>"
    )
    parts.append(
        f'<text x="16" y="{(MARGIN_T + HEIGHT - MARGIN_B) / 2:.2f}" '
        f'text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {(MARGIN_T + HEIGHT - MARGIN_B) / 2:.2f})">'
        f"score</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _safe_name(text):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def render_curves(csv_paths, out_dir):
    """One SVG per (run, evaluated task): score against the global epoch
    index, with dashed separators at task boundaries.  Returns the paths."""
    rows = _read_rows(list(csv_paths))
    if not rows:
        raise ChartError("no metric rows to render")
    groups = {}
    for row in rows:
        groups.setdefault((row["run_id"], row["eval_task"]), []).append(row)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for (run_id, eval_task) in sorted(groups):
        series = sorted(groups[(run_id, eval_task)], key=lambda r: (r["slot"], r["epoch"]))
        points = [r["score"] for r in series]
        boundaries = [
            i for i in range(1, len(series)) if series[i]["slot"] != series[i - 1]["slot"]
        ]
        svg = _render_one(run_id, eval_task, points, boundaries)
        path = os.path.join(out_dir, f"{_safe_name(run_id)}__{_safe_name(eval_task)}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
        written.append(path)
    return written
