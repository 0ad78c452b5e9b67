import json
import math

import numpy as np

from tensor_programs.report import (
    ROW_FIELDS,
    ReportRow,
    build_report,
    dumps,
    read_csv,
    validate_report,
    write_csv,
    write_report,
)


def test_report_row_errors():
    row = ReportRow("energy", 128, 2.1, 0.05, 2.0, "detranspose")
    assert math.isclose(row.abs_err, 0.1)
    assert math.isclose(row.rel_err, 0.05)
    assert ReportRow("overlap", 128, 0.01, 0.01, 0.0).rel_err is None
    assert ReportRow("energy", 128, 2.1).abs_err is None
    assert ReportRow("energy", empirical=float("nan"), theory=1.0).to_dict()["empirical"] is None
    assert list(row.to_dict()) == list(ROW_FIELDS)


def test_built_report_is_valid(tmp_path):
    rows = [ReportRow("energy", 64, 2.1, 0.1, 2.0, "detranspose"), ReportRow("limit", theory=1.5)]
    report = build_report(rows, "input vec x\n", {"sigma": {"W": np.float64(1.5)}}, ["stable"])
    assert validate_report(report) == []
    text = write_report(report, tmp_path / "report.json")
    assert (tmp_path / "report.json").read_text() == text
    loaded = json.loads(text)
    assert loaded["spec"]["sigma"]["W"] == 1.5
    assert loaded["versions"]["numpy"] == np.__version__
    assert validate_report(loaded) == []


def test_invalid_reports():
    report = build_report([ReportRow("energy", 64, 2.1)])
    del report["rows"][0]["route"]
    assert any("'rows'" in problem and "route" in problem for problem in validate_report(report))
    report = build_report([ReportRow("energy", 64, 2.1)])
    report["rows"][0]["width"] = "wide"
    assert any("width" in problem for problem in validate_report(report))
    report = build_report([])
    del report["versions"]
    assert any("'versions'" in problem for problem in validate_report(report))


def test_dumps_numpy_values():
    text = dumps({"gram": np.eye(2), "rank": np.int64(2), "stable": np.bool_(True), "nan": np.nan})
    assert json.loads(text) == {"gram": [[1.0, 0.0], [0.0, 1.0]], "rank": 2, "stable": True, "nan": None}


def test_csv_round_trip(tmp_path):
    rows = [
        ReportRow("energy", 64, 2.1, 0.1, 2.0, "detranspose").to_dict(),
        ReportRow("limit", theory=1.5).to_dict(),
    ]
    path = tmp_path / "rows.csv"
    write_csv(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(ROW_FIELDS)
    assert read_csv(path) == rows
