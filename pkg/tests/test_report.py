import json

import pytest

from latentchoice.errors import UsageError
from latentchoice.mnl import ChoiceModelParams, EstimationResult, estimate, fit_statistics
from latentchoice.optimize import OptimizerConfig
from latentchoice.report import EXTENSIONS, ComparisonReport, ModelColumn, render_report


@pytest.fixture
def fitted(small_dataset):
    init = ChoiceModelParams.zeros(small_dataset.catalog)
    return estimate(small_dataset, init, OptimizerConfig(method="bfgs", tolerance=1e-6))


def test_text_report_marks_reference(fitted):
    report = ComparisonReport(title="Demo", columns=[ModelColumn.from_result("MNL", fitted)])
    text = render_report(report)
    assert text.startswith("Demo\n")
    line = next(row for row in text.splitlines() if row.startswith("ASC_car"))
    assert "0 (ref.)" in line
    assert "Model statistics" in text
    assert "rho square" in text


def test_compact_report_hides_generic_blocks(small_dataset):
    params = ChoiceModelParams.zeros(small_dataset.catalog, utility_generic=["x1"])
    stats = fit_statistics(-100.0, -90.0, params.n_free, 100)
    result = EstimationResult(params, stats, True, 0, 0.0, "converged")
    compact = ModelColumn.from_result("MNL", result)
    full = ModelColumn.from_result("MNL", result, full=True)
    assert all(not p.name.startswith("bus:") for p in compact.parameters)
    assert {"bus:x1", "train:x1"} <= {p.name for p in full.parameters}


def test_report_without_models():
    report = ComparisonReport(title="Empty")
    assert report.deltas == {}
    text = render_report(report)
    assert "Final Loglikelihood" in text
    assert json.loads(render_report(report, "structured"))["columns"] == []


def test_deltas_compare_last_with_first(fitted):
    worse = EstimationResult(
        fitted.params,
        fit_statistics(fitted.statistics.null_ll, fitted.statistics.final_ll - 5.0, fitted.params.n_free, 200),
        True,
        0,
        0.0,
        "converged",
    )
    report = ComparisonReport(columns=[ModelColumn.from_result("ICLV", worse), ModelColumn.from_result("C-RBM", fitted)])
    assert report.deltas["final_ll"] == pytest.approx(5.0)
    assert report.deltas["aic"] == pytest.approx(-10.0)


def test_every_format_is_deterministic(tmp_path, fitted):
    report = ComparisonReport(columns=[ModelColumn.from_result("MNL", fitted)])
    for fmt, ext in EXTENSIONS.items():
        first = render_report(report, fmt, tmp_path / f"a.{ext}")
        second = render_report(report, fmt, tmp_path / f"b.{ext}")
        assert first == second
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "section,parameter,MNL value,MNL std. err.,MNL t-test"
    payload = json.loads((tmp_path / "a.json").read_text())
    assert payload["columns"][0]["label"] == "MNL"


def test_render_errors(tmp_path, fitted):
    report = ComparisonReport(columns=[ModelColumn.from_result("MNL", fitted)])
    with pytest.raises(UsageError):
        render_report(report, "latex")
    with pytest.raises(UsageError):
        render_report(report, "text", tmp_path / "missing" / "report.txt")
