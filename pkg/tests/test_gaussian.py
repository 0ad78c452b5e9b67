import math

import numpy as np
import pytest

from tensor_programs.errors import MissingDerivative, NumericError
from tensor_programs.gaussian import (
    ExpectationMethod,
    GaussianSpec,
    condition_gaussian,
    conditional_matrix_law,
    expect,
    numeric_rank,
    pinv,
    stein_derivative,
    synthetic_labels,
    v_op,
)
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import ExprDag
from tensor_programs.rng import stream


def _law(cov, mean=None):
    cov = np.asarray(cov, dtype=float)
    labels = synthetic_labels(cov.shape[0])
    mean = np.zeros(cov.shape[0]) if mean is None else mean
    return GaussianSpec(mean, cov, labels), [ExprDag.leaf(v) for v in labels]


def test_gaussian_spec_validation():
    labels = synthetic_labels(2)
    with pytest.raises(NumericError, match="dimension mismatch"):
        GaussianSpec([0.0], np.eye(2), labels)
    with pytest.raises(NumericError, match="positive semi-definite"):
        GaussianSpec([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], labels)
    with pytest.raises(NumericError, match="symmetric"):
        GaussianSpec([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], labels)
    law = GaussianSpec([1.0, 2.0], [[2.0, 1.0], [1.0, 1.0]], labels)
    marginal = law.marginal([labels[1]])
    assert marginal.mean.tolist() == [2.0] and marginal.cov.tolist() == [[1.0]]
    with pytest.raises(NumericError):
        law.index("missing")


def test_singular_factor():
    law, _ = _law([[1.0, 1.0], [1.0, 1.0]])
    _, factor = law.factor()
    assert factor.shape == (2, 1)
    assert np.allclose(factor @ factor.T, law.cov)


def test_affine_expectation_is_exact():
    law, (a, b) = _law([[2.0, 0.5], [0.5, 1.0]], mean=[1.0, -1.0])
    fn = ExprDag.apply(NonlinRef("lincomb", [1.0, 2.0]), a, b)
    moments = expect([fn, a], law)
    assert moments.method == "exact"
    assert moments.mean == pytest.approx([-1.0, 1.0])
    # Var(a + 2b) = 2 + 4 * 0.5 + 4 * 1
    assert moments.gram[0, 0] == pytest.approx(8.0 + 1.0)
    assert moments.gram[0, 1] == pytest.approx(2.0 + 2 * 0.5 + (-1.0) * 1.0)


def test_quadrature_moments():
    law, (a,) = _law([[1.0]])
    moments = expect([ExprDag.apply("mul", a, a, a, a)], law, ExpectationMethod.quadrature())
    assert moments.method == "quadrature"
    assert moments.mean[0] == pytest.approx(3.0)
    assert v_op("relu", [[2.0]])[0, 0] == pytest.approx(1.0)


def test_relu_arccos_kernel():
    sigma = np.array([[1.0, 0.6], [0.6, 2.0]])
    value = v_op("relu", sigma, ExpectationMethod.quadrature())[0, 1]
    norm = math.sqrt(sigma[0, 0] * sigma[1, 1])
    theta = math.acos(sigma[0, 1] / norm)
    expected = norm / (2 * math.pi) * (math.sin(theta) + (math.pi - theta) * math.cos(theta))
    assert value == pytest.approx(expected, rel=2e-2)


def test_monte_carlo_is_seeded():
    law, leaves = _law(np.eye(4))
    fn = ExprDag.apply(NonlinRef("tanh"), ExprDag.apply(NonlinRef("lincomb", [1, 1, 1, 1]), *leaves))
    method = ExpectationMethod.monte_carlo(samples=20000, seed=3)
    first = expect([fn], law, method)
    second = expect([fn], law, method)
    assert first.method == "monte_carlo"
    assert first.gram[0, 0] == second.gram[0, 0]
    assert first.gram_stderr[0, 0] > 0
    other = expect([fn], law, method.keyed(1))
    assert other.gram[0, 0] != first.gram[0, 0]
    # auto falls back to Monte Carlo above the quadrature dimension limit
    assert expect([fn], law).method == "monte_carlo"
    with pytest.raises(NumericError, match="quadrature"):
        expect([fn], law, ExpectationMethod.quadrature())


def test_missing_law():
    law, _ = _law(np.eye(1))
    other = ExprDag.leaf(synthetic_labels(2)[1])
    with pytest.raises(NumericError, match="dimension mismatch"):
        expect([other], law)


def test_expectation_method_validation():
    with pytest.raises(ValueError):
        ExpectationMethod("simpson")
    with pytest.raises(ValueError):
        ExpectationMethod(samples=1)
    assert ExpectationMethod().keyed(2, 3).key == (2, 3)


def test_pinv_and_rank():
    m = np.array([[1.0, 2.0], [2.0, 4.0]])
    assert numeric_rank(m) == 1
    assert np.allclose(m @ pinv(m) @ m, m)
    assert numeric_rank(np.zeros((2, 2))) == 0
    assert pinv(np.zeros((0, 3))).shape == (3, 0)


def test_condition_gaussian():
    law, _ = _law([[1.0, 0.8], [0.8, 1.0]])
    conditional = condition_gaussian(law, [1], [2.0])
    assert conditional.labels == (law.labels[0],)
    assert conditional.mean[0] == pytest.approx(1.6)
    assert conditional.cov[0, 0] == pytest.approx(0.36)
    with pytest.raises(NumericError):
        condition_gaussian(law, [1], [1.0, 2.0])


def test_conditional_matrix_law():
    rng = stream(0, 1)
    n1, n2 = 6, 5
    a = rng.standard_normal((n1, n2))
    q = rng.standard_normal((n2, 2))
    p = rng.standard_normal((n1, 1))
    law = conditional_matrix_law((n1, n2), 1.0, q, a @ q, p, a.T @ p)
    sample = law.sample(stream(0, 2))
    assert np.allclose(sample @ q, a @ q)
    assert np.allclose(sample.T @ p, a.T @ p)
    with pytest.raises(NumericError, match="inconsistent"):
        conditional_matrix_law((n1, n2), 1.0, q, a @ q, p, rng.standard_normal(n2))


@pytest.mark.parametrize("rank", [3, 2, 1])
def test_pinv_identities(rank):
    rng = stream(11, rank)
    for _ in range(5):
        m = rng.standard_normal((5, rank)) @ rng.standard_normal((rank, 3))
        plus = pinv(m)
        assert numeric_rank(m) == rank
        assert np.allclose(m @ plus @ m, m, rtol=0, atol=1e-8)
        assert np.allclose(plus @ m @ plus, plus, rtol=0, atol=1e-8)
        assert np.allclose((m @ plus).T, m @ plus, rtol=0, atol=1e-8)
        assert np.allclose((plus @ m).T, plus @ m, rtol=0, atol=1e-8)


def test_conditioning_in_two_steps():
    rng = stream(12)
    factor = rng.standard_normal((6, 6))
    law = GaussianSpec(rng.standard_normal(6), factor @ factor.T + np.eye(6), synthetic_labels(6))
    values = rng.standard_normal(4)
    once = condition_gaussian(law, [1, 3, 4, 5], values)
    # after the first step the labels left are those of coordinates 0, 2, 4, 5
    first = condition_gaussian(law, [1, 3], values[:2])
    twice = condition_gaussian(first, [2, 3], values[2:])
    assert twice.labels == once.labels == (law.labels[0], law.labels[2])
    assert np.allclose(twice.mean, once.mean, rtol=0, atol=1e-8)
    assert np.allclose(twice.cov, once.cov, rtol=0, atol=1e-8)


def test_conditional_matrix_projections():
    rng = stream(13)
    column = rng.standard_normal((7, 1))
    for n1, n2, q, p in (
        (6, 5, rng.standard_normal((5, 2)), rng.standard_normal((6, 1))),
        (4, 7, np.hstack([column, 2 * column, rng.standard_normal((7, 1))]), rng.standard_normal((4, 2))),
    ):
        a = rng.standard_normal((n1, n2))
        law = conditional_matrix_law((n1, n2), 1.0, q, a @ q, p, a.T @ p)
        for projection in (law.proj_left, law.proj_right):
            assert np.allclose(projection @ projection, projection, rtol=0, atol=1e-10)
            assert np.allclose(projection, projection.T, rtol=0, atol=1e-10)
        assert np.allclose(law.proj_right @ q, 0.0, rtol=0, atol=1e-10)
        assert np.allclose(p.T @ law.proj_left, 0.0, rtol=0, atol=1e-10)


def test_identity_v_transform():
    rng = stream(14)
    for rows, cols in ((1, 2), (2, 3), (3, 5), (4, 2)):
        factor = rng.standard_normal((rows, cols))
        sigma = factor @ factor.T
        assert np.allclose(v_op("id", sigma), sigma, rtol=0, atol=1e-10)


def test_stein_derivative_routes():
    law, (a, b) = _law([[1.0, 0.3], [0.3, 2.0]])
    fn = ExprDag.apply(NonlinRef("tanh"), a)
    method = ExpectationMethod.quadrature()
    symbolic = stein_derivative(fn, law, law.labels[0], method, route="derivative")
    stein = stein_derivative(fn, law, law.labels[0], method, route="stein")
    assert symbolic == pytest.approx(stein, rel=1e-6)
    assert stein_derivative(fn, law, law.labels[1], method) == 0.0


def test_stein_derivative_dirac():
    law, (a,) = _law([[4.0]])
    method = ExpectationMethod.quadrature()
    # E step'(z) is the density of z at zero
    value = stein_derivative(ExprDag.apply("step", a), law, law.labels[0], method)
    assert value == pytest.approx(1 / math.sqrt(2 * math.pi * 4.0))


def test_stein_derivative_fallback():
    law, (a, b) = _law(np.eye(2))
    fn = ExprDag.apply(NonlinRef("batchnorm_id", [1]), a, b)
    method = ExpectationMethod.quadrature()
    with pytest.raises(MissingDerivative):
        stein_derivative(fn, law, law.labels[0], method, route="derivative")
    # batchnorm_id[1](a, b) = sign(a - b) here, whose derivative in a is 2 delta(a - b)
    sampled = ExpectationMethod.monte_carlo(samples=200_000, seed=1)
    value = stein_derivative(fn, law, law.labels[0], sampled, route="auto")
    assert value == pytest.approx(2 / math.sqrt(2 * math.pi * 2.0), rel=5e-2)
    with pytest.raises(ValueError):
        stein_derivative(fn, law, law.labels[0], method, route="numeric")
