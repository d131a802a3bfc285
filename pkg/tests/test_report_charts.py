from components.report_charts import error_trace_chart, relative_error_chart, save_chart, space_scaling_chart
from robust_framework import RobustParams, space_accounting

from cli import RunConfig, run


def test_error_trace_skips_missing_exact_values():
    checkpoints = [
        {"t": 1, "estimate": 1.0, "exact": 1.0},
        {"t": 2, "estimate": 4.5, "exact": None},
    ]
    vega = error_trace_chart(checkpoints, "estimate").to_dict()
    values = next(iter(vega["datasets"].values()))
    assert [(row["t"], row["series"]) for row in values] == [(1, "estimate"), (1, "exact"), (2, "estimate")]
    assert vega["title"] == "estimate"


def test_relative_error_chart_draws_the_eps_band():
    steps = [{"t": t, "rel_error": 0.01 * t} for t in range(1, 6)]
    vega = relative_error_chart(steps, 0.25, "duel").to_dict()
    assert len(vega["layer"]) == 2
    assert vega["title"] == "duel"


def test_space_scaling_chart_saves_html(tmp_path):
    accounting = [space_accounting(RobustParams(eps, "F2")) for eps in (0.5, 0.25)]
    path = save_chart(space_scaling_chart(accounting), tmp_path / "space.html")
    assert path.read_text().lstrip().lower().startswith("<!doctype html>")


def test_estimate_task_writes_its_chart(tmp_path):
    out = tmp_path / "estimate.json"
    _, report = run(RunConfig("estimate", eps=0.5, universe=30, length=40, chart=True, out=str(out)))
    assert report["results"]["chart"] == str(tmp_path / "estimate.html")
    assert (tmp_path / "estimate.html").exists()
