import numpy as np
import pytest

from tensor_programs.errors import ProgramError
from tensor_programs.nonlinearities import (
    ACTIVATIONS,
    Nonlinearity,
    NonlinRef,
    apply_nonlinearity,
    check_reference,
    get_nonlinearity,
    partial_templates,
    register,
    registered_names,
)


def test_reference_rendering():
    assert str(NonlinRef("tanh")) == "tanh"
    assert str(NonlinRef("soft_threshold", [0.5])) == "soft_threshold[0.5]"
    assert NonlinRef("lincomb", [1, -1]).params == (1.0, -1.0)


def test_registry_contents():
    names = registered_names()
    for name in ACTIVATIONS:
        assert name in names
    for name in ("tanh_prime", "tanh_bwd", "relu_prime", "relu_bwd", "batchnorm_relu", "shift", "mul"):
        assert name in names
    assert "sign_prime" not in names
    assert "batchnorm_soft_threshold" not in names
    assert get_nonlinearity("tanh").derivative == "tanh_prime"
    assert get_nonlinearity("sign").derivative is None
    with pytest.raises(ProgramError, match="unknown nonlinearity"):
        get_nonlinearity("softplus")


def test_register_twice():
    with pytest.raises(ProgramError, match="already registered"):
        register(Nonlinearity("tanh", np.tanh))


def test_forward_values():
    x = np.array([-2.0, -0.25, 0.0, 0.5, 3.0])
    assert np.allclose(apply_nonlinearity(NonlinRef("relu"), x), [0, 0, 0, 0.5, 3])
    assert np.allclose(apply_nonlinearity(NonlinRef("step"), x), [0, 0, 0, 1, 1])
    assert np.allclose(apply_nonlinearity(NonlinRef("quadratic"), x), 0.5 * x**2)
    assert np.allclose(apply_nonlinearity(NonlinRef("soft_threshold", [1]), x), [-1, 0, 0, 0, 2])
    assert np.allclose(apply_nonlinearity(NonlinRef("tanh_bwd"), x, 2 * x), (1 - np.tanh(x) ** 2) * 2 * x)
    assert np.allclose(apply_nonlinearity(NonlinRef("lincomb", [2, -1]), x, x**2), 2 * x - x**2)
    assert np.allclose(apply_nonlinearity(NonlinRef("mul"), x, x, x), x**3)
    assert np.allclose(apply_nonlinearity(NonlinRef("shift", [1.5]), x), x + 1.5)


def test_batchnorm():
    batch = [np.array([1.0, 2.0, 0.5]), np.array([3.0, 2.0, -0.5])]
    first = apply_nonlinearity(NonlinRef("batchnorm_id", [1]), *batch)
    second = apply_nonlinearity(NonlinRef("batchnorm_id", [2]), *batch)
    # the middle coordinate has no spread across the batch
    assert np.allclose(first, [-1.0, 0.0, 1.0])
    assert np.allclose(second, [1.0, 0.0, -1.0])
    relu = apply_nonlinearity(NonlinRef("batchnorm_relu", [1]), *batch)
    assert np.allclose(relu, [0.0, 0.0, 1.0])


def test_check_reference():
    assert check_reference(NonlinRef("tanh"), 1) is None
    assert "takes 1 argument" in check_reference(NonlinRef("tanh"), 2)
    assert "parameter" in check_reference(NonlinRef("soft_threshold"), 1)
    assert check_reference(NonlinRef("lincomb", [1, 2]), 2) is None
    assert check_reference(NonlinRef("lincomb", [1]), 2) is not None
    assert check_reference(NonlinRef("batchnorm_tanh", [2]), 2) is None
    assert "index" in check_reference(NonlinRef("batchnorm_tanh", [3]), 2)
    assert "batch" in check_reference(NonlinRef("batchnorm_tanh", [1]), 1)
    assert "unknown" in check_reference(NonlinRef("gelu"), 1)


def test_partial_templates():
    assert partial_templates(NonlinRef("tanh"), 0, 1) == [(("call", "tanh_prime", (), (("arg", 0),)), None)]
    assert partial_templates(NonlinRef("lincomb", [2, -3]), 1, 2) == [(("const", -3.0), None)]
    assert partial_templates(NonlinRef("batchnorm_relu", [1]), 0, 2) is None
    # relu'' is a Dirac mass at the argument
    assert partial_templates(NonlinRef("relu_prime"), 0, 1) == [(("const", 1.0), ("arg", 0))]
