"""Series emission contracts: CSV layout, SVG grouping, empty-input behavior."""

import numpy as np
import pytest

from burgers_rom.errors import UsageError
from burgers_rom.plots import MetricSeries, emit_plots, emit_series, series_to_csv


def _series(kind="L_CAE", role="train", n=100, seed=None):
    times = np.arange(1, n + 1) * 0.02
    values = np.exp(-times) * 1e-3
    return MetricSeries(kind=kind, role=role, times=times, values=values, seed=seed)


def test_series_csv_rows_and_header():
    csv = series_to_csv(_series(n=100))
    lines = csv.strip().split("\n")
    assert lines[0] == "t,value,reconstruction_only"
    assert len(lines) == 101


def test_empty_emission_is_error_and_writes_nothing(tmp_path):
    out = tmp_path / "plots"
    with pytest.raises(UsageError):
        emit_plots([], out)
    assert not out.exists()


def test_emit_plots_writes_csv_and_svg(tmp_path):
    series = [_series("L_CAE", "train"), _series("L_CAE", "test"),
              _series("L_RC-NF_1", "train")]
    written = emit_plots(series, tmp_path)
    names = {p.name for p in written}
    assert names == {"L_CAE_train.csv", "L_CAE_test.csv", "L_RC-NF_1_train.csv",
                     "L_CAE.svg", "L_RC-NF_1.svg"}
    svg = (tmp_path / "L_CAE.svg").read_text()
    assert svg.startswith("<?xml")
    assert "</svg>" in svg


def test_csv_values_round_trip_exactly(tmp_path):
    s = _series(n=13)
    emit_series([s], tmp_path)
    lines = (tmp_path / "L_CAE_train.csv").read_text().strip().split("\n")[1:]
    got = np.array([float(line.split(",")[1]) for line in lines])
    assert np.array_equal(got, s.values)
