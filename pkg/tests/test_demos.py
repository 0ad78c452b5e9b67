import json

import pytest

from tensor_programs.config import load_settings
from tensor_programs.demos import DEMOS, run_demo
from tensor_programs.errors import ProgramError
from tensor_programs.program import parse_program
from tensor_programs.report import dumps, validate_report


def _rows(report, route):
    return {row["quantity"]: row for row in report["rows"] if row["route"] == route}


def test_semicircle_demo(quick_settings):
    report = run_demo("semicircle", quick_settings, n=64, k=2)
    assert [row["theory"] for row in report["rows"]] == [0.0, 1.0]
    assert report["spec"]["demo"] == "semicircle"
    assert report["spec"]["settings"]["seed"] == 7
    assert report["program"].startswith("syntax")
    assert validate_report(json.loads(dumps(report))) == []


def test_mlp_gp_demo_agrees_with_closed_form(quick_settings):
    report = run_demo("mlp-gp", quick_settings, n=64, k=2)
    closed = _rows(report, "closed_form")
    program = _rows(report, "notranspose")
    assert sorted(closed) == ["gp_1_1", "gp_1_2", "gp_2_2"]
    for name, row in closed.items():
        assert row["theory"] == pytest.approx(program[name]["theory"], rel=1e-5)
        assert row["width"] == 64
    assert report["spec"]["setup"]["depth"] == 2


def test_rnn_demo_tied_and_untied_limits_agree(quick_settings):
    report = run_demo("rnn", quick_settings, n=64, k=2)
    untied = _rows(report, "untied")
    tied = _rows(report, "notranspose")
    assert untied and sorted(untied) == sorted(tied)
    for name, row in untied.items():
        assert row["theory"] == pytest.approx(tied[name]["theory"], rel=1e-5)


def test_amp_demo(quick_settings):
    report = run_demo("amp", quick_settings, n=200, k=2)
    assert [row["quantity"] for row in report["rows"]] == ["b_sq[0]", "h_sq[1]", "b_sq[1]", "h_sq[2]"]
    assert report["program"] == ""
    assert report["spec"]["setup"]["N"] == 200
    assert validate_report(json.loads(dumps(report))) == []


def test_unknown_demo(quick_settings):
    assert "marchenko-pastur" in DEMOS
    with pytest.raises(ProgramError, match="unknown demo"):
        run_demo("transformer", quick_settings)


def _agree(row, tolerance=0.1):
    return abs(row["empirical"] - row["theory"]) <= tolerance * max(1.0, abs(row["theory"]))


def test_marchenko_pastur_demo_lists_its_programs(quick_settings):
    report = run_demo("marchenko-pastur", quick_settings, n=32, k=2)
    assert report["program"] == ""
    programs = report["spec"]["setup"]["programs"]
    assert sorted(programs) == ["0.5", "1", "2"]
    for text in programs.values():
        assert parse_program(text).has_transpose
    assert {row["quantity"].split("[")[1] for row in report["rows"]} == {"alpha=0.5]", "alpha=1]", "alpha=2]"}


def test_signal_prop_demo_matches_theory():
    settings = load_settings("tests/settings_quick.yml", method="auto")
    report = run_demo("signal-prop", settings, n=2048, k=2)
    closed = _rows(report, "closed_form")
    assert sorted(closed) == ["pi1_1_1", "pi1_1_2", "pi1_2_2", "pi2_1_1", "pi2_1_2", "pi2_2_2"]
    for row in closed.values():
        assert _agree(row, 0.15)


@pytest.mark.parametrize("name", ["mlp-gp", "rnn"])
def test_demo_simulations_approach_theory(quick_settings, name):
    report = run_demo(name, quick_settings, n=2048, k=2)
    assert report["rows"]
    for row in report["rows"]:
        assert _agree(row)
