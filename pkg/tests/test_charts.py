"""SVG curve rendering from metric CSVs: grouping, determinism, errors."""

import os

import pytest

from lamol_forge import charts
from lamol_forge.training import CSV_HEADER


def _row(run_id, slot, epoch, eval_task, score):
    return ",".join(
        (run_id, "FINETUNE", "0", "1", str(slot), str(epoch), eval_task, "EM", f"{score:.6f}")
    )


def _write_csv(path, rows, header=True):
    lines = [",".join(CSV_HEADER)] if header else []
    lines.extend(rows)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _two_task_rows(run_id="r1"):
    rows = []
    for slot, epoch, scores in (
        (1, 1, {"copy": 40.0, "toysent": 0.0}),
        (1, 2, {"copy": 90.0, "toysent": 0.0}),
        (2, 1, {"copy": 70.0, "toysent": 50.0}),
        (2, 2, {"copy": 55.0, "toysent": 95.0}),
    ):
        for task, score in scores.items():
            rows.append(_row(run_id, slot, epoch, task, score))
    return rows


def test_renders_one_svg_per_run_and_task(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, _two_task_rows())
    out = str(tmp_path / "svg")
    written = charts.render_curves([csv_path], out)
    names = sorted(os.path.basename(p) for p in written)
    assert names == ["r1__copy.svg", "r1__toysent.svg"]
    for path in written:
        with open(path, encoding="utf-8") as fh:
            body = fh.read()
        assert body.startswith("<svg ")
        assert body.rstrip().endswith("</svg>")
        assert "<polyline" in body


def test_rendering_is_byte_deterministic(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, _two_task_rows())

    def render(tag):
        out = str(tmp_path / tag)
        paths = charts.render_curves([csv_path], out)
        return {os.path.basename(p): open(p, "rb").read() for p in paths}

    assert render("a") == render("b")


def test_task_boundary_gets_one_dashed_separator(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, _two_task_rows())
    (svg_path,) = [
        p
        for p in charts.render_curves([csv_path], str(tmp_path / "svg"))
        if p.endswith("copy.svg")
    ]
    with open(svg_path, encoding="utf-8") as fh:
        body = fh.read()
    # slots 1 and 2 meet once; gridlines are solid so only the separator dashes
    assert body.count("stroke-dasharray") == 1


def test_score_extremes_map_to_plot_edges(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(
        csv_path,
        [_row("r1", 1, 1, "copy", 100.0), _row("r1", 1, 2, "copy", 0.0)],
    )
    (svg_path,) = charts.render_curves([csv_path], str(tmp_path / "svg"))
    with open(svg_path, encoding="utf-8") as fh:
        body = fh.read()
    top = charts.MARGIN_T
    bottom = charts.HEIGHT - charts.MARGIN_B
    assert f'points="{charts._scale_x(0, 2):.2f},{float(top):.2f} ' in body
    assert body.count(f",{float(bottom):.2f}") >= 1


def test_single_point_series_is_centered(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, [_row("r1", 1, 1, "copy", 50.0)])
    (svg_path,) = charts.render_curves([csv_path], str(tmp_path / "svg"))
    with open(svg_path, encoding="utf-8") as fh:
        body = fh.read()
    mid_x = charts.MARGIN_L + (charts.WIDTH - charts.MARGIN_L - charts.MARGIN_R) / 2
    assert f'points="{mid_x:.2f},' in body


def test_multiple_csvs_merge_and_run_ids_stay_separate(tmp_path):
    a = str(tmp_path / "a.csv")
    b = str(tmp_path / "b.csv")
    _write_csv(a, _two_task_rows("run_a"))
    _write_csv(b, _two_task_rows("run_b"))
    written = charts.render_curves([a, b], str(tmp_path / "svg"))
    assert len(written) == 4


def test_headerless_csv_is_accepted(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, [_row("r1", 1, 1, "copy", 10.0)], header=False)
    written = charts.render_curves([csv_path], str(tmp_path / "svg"))
    assert len(written) == 1


def test_unsafe_ids_are_sanitized_in_filenames(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, [_row("run/one", 1, 1, "copy task", 10.0)])
    (svg_path,) = charts.render_curves([csv_path], str(tmp_path / "svg"))
    assert os.path.basename(svg_path) == "run_one__copy_task.svg"


def test_empty_input_is_an_error(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    _write_csv(csv_path, [])
    with pytest.raises(charts.ChartError, match="no metric rows"):
        charts.render_curves([csv_path], str(tmp_path / "svg"))


def test_short_row_reports_file_and_line(tmp_path):
    csv_path = str(tmp_path / "metrics.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        fh.write("r1,FINETUNE,0,1\n")
    with pytest.raises(charts.ChartError, match=r"row 2: expected 9 fields, got 4"):
        charts.render_curves([csv_path], str(tmp_path / "svg"))


def test_non_numeric_and_out_of_range_scores_are_errors(tmp_path):
    bad_value = str(tmp_path / "a.csv")
    _write_csv(bad_value, ["r1,FINETUNE,0,1,1,one,copy,EM,50.0"])
    with pytest.raises(charts.ChartError, match="non-numeric"):
        charts.render_curves([bad_value], str(tmp_path / "svg"))
    bad_range = str(tmp_path / "b.csv")
    _write_csv(bad_range, [_row("r1", 1, 1, "copy", 101.0)])
    with pytest.raises(charts.ChartError, match=r"outside \[0, 100\]"):
        charts.render_curves([bad_range], str(tmp_path / "svg"))
