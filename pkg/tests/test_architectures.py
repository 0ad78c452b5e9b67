import numpy as np
import pytest

from tensor_programs.architectures import ArchSpec, build_program, program_text
from tensor_programs.errors import ProgramError
from tensor_programs.limits import check_extension, split_extension
from tensor_programs.program import Nonlin, validate

TWO = ((1.0, 0.0), (0.6, 0.8))


def test_arch_spec_normalization():
    a = ArchSpec(depth=2, sigma_w=1.5, ratios=(2.0, 4.0))
    assert a.sigma_w == (1.5, 1.5, 1.5)
    assert a.sigma_b == (0.0, 0.0)
    assert a.ratios == (1.0, 2.0)
    assert a.weight_std(3) == 1.5
    assert a.dim == 1 and a.batch == 1
    assert np.allclose(ArchSpec(inputs=TWO).input_gram(), [[0.5, 0.3], [0.3, 0.5]])


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"variant": "transformer"}, "unsupported variant"),
        ({"readout": "max"}, "unsupported readout"),
        ({"depth": 0}, "depth"),
        ({"activation": "soft_threshold"}, "unary function without parameters"),
        ({"inputs": ((1.0,), (1.0, 2.0))}, "share a dimension"),
        ({"sigma_w": (1.0, 1.0)}, "sigma_w needs 3 values"),
        ({"sigma_b": -1.0}, "non-negative"),
        ({"ratios": (1.0,)}, "ratios"),
        ({"variant": "batchnorm_forward"}, "batch of at least 2"),
        ({"variant": "simple_rnn", "depth": 3, "inputs": ((1.0, 2.0),)}, "does not split"),
        ({"variant": "cnn1d_circular", "inputs": ((1.0, 2.0),)}, "pixels"),
        ({"variant": "cnn1d_circular", "inputs": ((1.0, 2.0, 3.0),), "kernel_weights": (0.5, 0.6)}, "sum to 1"),
    ],
)
def test_arch_spec_errors(kwargs, message):
    with pytest.raises(ProgramError, match=message):
        ArchSpec(**kwargs)


def test_mlp_program():
    a = ArchSpec(depth=2, inputs=TWO, sigma_w=(1.0, 2.0, 0.5), sigma_b=0.1, ratios=(1.0, 2.0))
    text = program_text(a)
    lines = text.splitlines()
    assert lines[0] == "syntax original"
    assert "h1_1 = Wx1_1 + b1" in lines
    assert "x2_2 = tanh(h2_2)" in lines
    assert "ratio n2 / n1 = 2" in lines
    assert "measure gp_1_2 = 0.25 * (x2_1 * x2_2)" in lines
    sk, cdc, spec = build_program(a)
    assert validate(sk) == []
    assert cdc.class_ids == ("n1", "n2")
    assert spec.alpha("n2", "n1") == pytest.approx(2.0)
    assert spec.cov_of(sk.lookup("Wx1_1"), sk.lookup("Wx1_2")) == pytest.approx(0.3)
    assert spec.cov_of(sk.lookup("Wx1_1"), sk.lookup("Wx1_1")) == pytest.approx(0.5)
    assert spec.sigma(sk.lookup("W2")) == 2.0
    assert [name for name, _ in sk.measures] == ["gp_1_1", "gp_1_2", "gp_2_2"]


def test_mean_pooled_readout():
    sk, _, _ = build_program(ArchSpec(depth=2, inputs=TWO, readout="gmp"))
    assert [name for name, _ in sk.measures] == ["pool_1_1", "pool_1_2", "pool_2_2"]


def test_backward_program():
    sk, cdc, spec = build_program(ArchSpec(variant="mlp_backward", depth=3, activation="relu", inputs=TWO))
    assert sk.has_transpose
    fwd, ext = split_extension(sk)
    assert check_extension(fwd, ext, spec, cdc) == []
    names = [name for name, _ in sk.measures]
    assert "pi1_1_2" in names and "pi3_2_2" in names
    with pytest.raises(ProgramError, match="no registered derivative"):
        program_text(ArchSpec(variant="mlp_backward", activation="sign"))


def test_other_variants_parse():
    for a in (
        ArchSpec(variant="resnet", depth=2, inputs=TWO, sigma_a=0.1),
        ArchSpec(variant="simple_rnn", depth=2, inputs=TWO),
        ArchSpec(variant="simple_rnn", depth=2, inputs=TWO, tied=False),
        ArchSpec(variant="batchnorm_forward", depth=2, inputs=TWO),
        ArchSpec(variant="cnn1d_circular", depth=2, inputs=((1.0, 0.0, 0.5, 0.5, 0.0, 1.0),), sigma_b=0.2),
    ):
        sk, cdc, _ = build_program(a)
        assert validate(sk) == []
        assert not sk.has_transpose
        assert sk.measures


def test_batchnorm_lines():
    sk, _, _ = build_program(ArchSpec(variant="batchnorm_forward", depth=1, inputs=TWO))
    line = sk.line(sk.lookup("x1_2"))
    assert isinstance(line, Nonlin)
    assert str(line.fn) == "batchnorm_tanh[2]"
    assert [sk.name_of(v) for v in line.args] == ["h1_1", "h1_2"]


def test_cnn_shifts():
    a = ArchSpec(variant="cnn1d_circular", depth=1, inputs=((1.0, 0.0, 0.5, 0.5, 0.0, 1.0),), sigma_b=0.2)
    lines = program_text(a).splitlines()
    assert "h1_p3_1 = Wx1_k0_p3_1 + Wx1_k1_p1_1 + b1  # layer 1 pixel 3 preactivations" in lines
    assert "measure gp_1_1 = 0.33333333333333331 * (x1_p1_1 * x1_p1_1 + x1_p2_1 * x1_p2_1 + x1_p3_1 * x1_p3_1)" in lines


def test_tied_rnn_shares_weights():
    sk, _, _ = build_program(ArchSpec(variant="simple_rnn", depth=3, inputs=((1.0, 0.5, -0.2),)))
    matrices = [line.name for line in sk.lines if type(line).__name__ == "MatIn"]
    assert matrices == ["W"]
    sk, _, _ = build_program(ArchSpec(variant="simple_rnn", depth=3, inputs=((1.0, 0.5, -0.2),), tied=False))
    matrices = [line.name for line in sk.lines if type(line).__name__ == "MatIn"]
    assert matrices == ["W1", "W2", "W3"]
