from fractions import Fraction

import pytest

from tensor_programs.errors import ProgramError
from tensor_programs.program import parse_program
from tensor_programs.spectra import (
    catalan,
    goe_moment,
    goe_program,
    marchenko_pastur_study,
    mp_moment,
    mp_moment_closed_form,
    semicircle_study,
    wishart_program,
)


def test_catalan_numbers():
    assert [catalan(k) for k in range(8)] == [1, 1, 2, 5, 14, 42, 132, 429]
    with pytest.raises(ValueError):
        catalan(-1)


def test_goe_moments():
    assert [goe_moment(k) for k in range(1, 9)] == [0, 1, 0, 2, 0, 5, 0, 14]
    assert goe_moment(0) == 1
    with pytest.raises(ValueError):
        goe_moment(-2)


def test_marchenko_pastur_moments():
    for k in range(1, 7):
        assert mp_moment(k, 1) == catalan(k)
    assert mp_moment(2, Fraction(1, 2)) == Fraction(3, 2)
    assert mp_moment(3, 2) == 1 + 3 * 2 + 2**2
    assert isinstance(mp_moment(4, Fraction(1, 3)), Fraction)
    for alpha in (0.25, 0.5, 2.0, 3.0):
        for k in range(7):
            assert mp_moment(k, alpha) == pytest.approx(mp_moment_closed_form(k, alpha))
    with pytest.raises(ValueError):
        mp_moment(2, 0)


def test_power_iteration_programs():
    sk = parse_program(goe_program(3))
    assert [name for name, _ in sk.measures] == ["moment1", "moment2", "moment3"]
    assert sk.has_transpose
    sk = parse_program(wishart_program(2, 0.5))
    assert sk.annotations.ratio == (("m", "n", 0.5),)
    with pytest.raises(ProgramError):
        goe_program(0)
    with pytest.raises(ProgramError):
        wishart_program(2, -1.0)


def test_semicircle_study():
    rows = semicircle_study(4, n=256, trials=3, seed=1)
    assert [row.quantity for row in rows] == ["moment1", "moment2", "moment3", "moment4"]
    assert [row.theory for row in rows] == [0.0, 1.0, 0.0, 2.0]
    assert all(row.route == "recursion" for row in rows)
    assert rows[1].empirical == pytest.approx(1.0, abs=0.2)


def test_marchenko_pastur_study():
    rows = marchenko_pastur_study(2, 0.5, m=256, trials=3, seed=2, workers=2)
    assert [row.theory for row in rows] == [1.0, 1.5]
    assert rows[0].width == 256
    assert rows[1].empirical == pytest.approx(1.5, abs=0.3)
