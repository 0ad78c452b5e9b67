import os

import pytest
from mkdocs.exceptions import ConfigurationError

from tensor_programs.config import load_settings


def test_packaged_defaults(monkeypatch):
    monkeypatch.delenv("TP_THREADS", raising=False)
    settings = load_settings()
    assert settings.seed == 0
    assert settings.trials == 10
    assert settings.method == "auto"
    assert settings.pinv_rcond == 1e-10
    assert settings.coupled is False
    assert settings.threads == (os.cpu_count() or 1)


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("TP_THREADS", "3")
    assert load_settings().threads == 3


def test_settings_file(quick_settings):
    assert quick_settings.seed == 7
    assert quick_settings.trials == 4
    assert quick_settings.threads == 2
    method = quick_settings.expectation_method()
    assert method.kind == "quadrature"
    assert method.seed == 7
    assert method.points_per_dim == 40


def test_overrides():
    settings = load_settings("tests/settings_quick.yml", trials=6, seed=None, psd_tol="1e-6", method="mc")
    assert settings.trials == 6
    assert settings.seed == 7
    assert settings.psd_tol == 1e-6
    assert settings.expectation_method().kind == "monte_carlo"
    assert settings.to_dict()["method"] == "mc"


def test_invalid_settings():
    with pytest.raises(ConfigurationError) as error:
        load_settings("tests/settings_invalid.yml")
    assert "'trials'" in str(error.value)
    assert "'method'" in str(error.value)
    with pytest.raises(ConfigurationError, match="'pinv_rcond'"):
        load_settings(pinv_rcond=-1.0)
    with pytest.raises(ConfigurationError, match="'seed'"):
        load_settings(seed=True)


def test_unreadable_settings(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_settings(str(tmp_path / "missing.yml"))
    listing = tmp_path / "listing.yml"
    listing.write_text("- seed\n- trials\n")
    with pytest.raises(ConfigurationError, match="must contain a mapping"):
        load_settings(str(listing))
    empty = tmp_path / "empty.yml"
    empty.write_text("")
    assert load_settings(str(empty)).trials == 10


def test_environment_caps_threads(monkeypatch):
    monkeypatch.setenv("TP_THREADS", "2")
    assert load_settings(threads=8).threads == 2
    assert load_settings(threads=1).threads == 1
    assert load_settings("tests/settings_quick.yml", threads=0).threads <= 2
    monkeypatch.delenv("TP_THREADS")
    assert load_settings(threads=8).threads == 8


def test_tolerances_reach_the_expectation_method():
    method = load_settings(psd_tol=1e-4).expectation_method()
    assert method.psd_tol == 1e-4
    assert load_settings().expectation_method().psd_tol == 1e-8
