import numpy as np
import pandas as pd
import pytest

from fod_forge.errors import ParameterError
from fod_forge.evalmetrics import DetectionParams, MetricsReport
from fod_forge.plotting import METRICS, curve_table, plot_histograms, plot_results
from fod_forge.volseg import histogram


def report(objects: float, accuracy: float, detection: float, false_positives: float, jaccard: float) -> MetricsReport:
    return MetricsReport(
        mean_accuracy=accuracy,
        detection_rate=detection,
        false_positive_rate=false_positives,
        mean_jaccard=jaccard,
        n_images=4,
        params=DetectionParams(),
        tags={"objects": objects},
    )


def test_single_report_has_a_zero_width_band(tmp_path):
    table = plot_results([report(10, 0.9, 80.0, 5.0, 0.7)], tmp_path)
    assert (table["std"] == 0.0).all()
    assert (table["n"] == 1).all()
    assert (tmp_path / "curves.png").exists()


def test_band_is_the_sample_standard_deviation(tmp_path):
    rng = np.random.default_rng(0)
    reports = []
    for objects in (5, 10):
        for _ in range(5):
            values = rng.random(4)
            reports.append(report(objects, values[0], 100 * values[1], 100 * values[2], values[3]))
    plot_results(reports, tmp_path)

    written = pd.read_csv(tmp_path / "curves.csv")
    for metric in METRICS:
        for objects in (5, 10):
            values = [getattr(r, metric) for r in reports if r.tags["objects"] == objects]
            row = written[(written["metric"] == metric) & (written["x"] == objects)].iloc[0]
            assert row["mean"] == pytest.approx(np.mean(values))
            assert row["std"] == pytest.approx(np.std(values, ddof=1))
            assert row["n"] == 5


def test_reports_without_the_x_tag_use_their_position():
    reports = [report(0, 0.5, 50.0, 0.0, 0.5), report(0, 0.7, 70.0, 0.0, 0.6)]
    for r in reports:
        r.tags = {}
    table = curve_table(reports)
    assert sorted(table["x"].unique()) == [0.0, 1.0]


def test_no_reports_is_an_error(tmp_path):
    with pytest.raises(ParameterError):
        plot_results([], tmp_path)


def test_histogram_figure_and_counts(tmp_path):
    values = np.random.default_rng(1).random((8, 8, 8))
    hist = histogram(values, 32, label_mask=values > 0.8)
    path = plot_histograms(hist, tmp_path / "hist.png", {"otsu": 0.5, "theta_0.0400": 0.04})

    assert path.exists()
    counts = pd.read_csv(tmp_path / "hist.csv")
    assert counts["count"].sum() == 512
    assert counts["foreign"].sum() == int((values > 0.8).sum())
