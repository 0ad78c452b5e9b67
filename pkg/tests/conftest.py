import pytest

from tensor_programs.config import load_settings
from tensor_programs.limits import SamplingSpec
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import (
    EXTENDED,
    ORIGINAL,
    Comp,
    LinComb,
    MatIn,
    MatMul,
    Nonlin,
    Skeleton,
    Transpose,
    VarId,
    VarKind,
    VecIn,
    compute_cdc,
    load_program,
)
from tensor_programs.rng import stream

FUNCTIONS = ("tanh", "relu", "erf", "abs")
COEFFICIENTS = (-2.0, -1.0, -0.5, 0.5, 1.0, 1.5)


def _compiled(path):
    sk = load_program(path)
    cdc = compute_cdc(sk)
    return sk, cdc, SamplingSpec.from_skeleton(sk, cdc)


def _random_skeleton(seed, size=10, extended=False, transposes=False, vectors=2, matrices=1):
    # input vectors come first, then input matrices, then random lines
    rng = stream(seed)
    lines = [VecIn(f"x{i}") for i in range(1, vectors + 1)]
    lines += [MatIn(f"W{i}") for i in range(1, matrices + 1)]

    def pick(candidates):
        return candidates[int(rng.integers(len(candidates)))]

    def coefficient():
        return pick(COEFFICIENTS)

    while len(lines) < size:
        found = [VarId(i, line.kind) for i, line in enumerate(lines, 1)]
        gvars = [v for v in found if v.kind is VarKind.G]
        hvars = [v for v in found if v.kind is VarKind.H]
        avars = [v for v in found if v.kind is VarKind.A]
        operations = ["matmul", "matmul", "lincomb", "nonlin"]
        if transposes:
            operations.append("trans")
        if extended and hvars:
            operations.append("comp")
        operation = pick(operations)
        name = f"v{len(lines) + 1}"
        if operation == "matmul":
            lines.append(MatMul(name, pick(avars), pick(gvars + hvars)))
        elif operation == "trans":
            lines.append(Transpose(name, pick([v for v in avars if isinstance(lines[v.line_number - 1], MatIn)])))
        elif operation == "lincomb":
            count = int(rng.integers(1, 4))
            lines.append(LinComb(name, [(coefficient(), pick(gvars)) for _ in range(count)]))
        elif operation == "nonlin":
            if rng.random() < 0.3:
                lines.append(Nonlin(name, NonlinRef("mul"), [pick(gvars), pick(gvars)]))
            else:
                lines.append(Nonlin(name, NonlinRef(pick(FUNCTIONS)), [pick(gvars)]))
        elif rng.random() < 0.5:
            lines.append(Comp(name, NonlinRef(pick(FUNCTIONS)), [pick(hvars)]))
        else:
            fn = NonlinRef("lincomb", [coefficient(), coefficient()])
            lines.append(Comp(name, fn, [pick(gvars), pick(hvars)]))
    return Skeleton(lines, EXTENDED if extended else ORIGINAL)


@pytest.fixture
def mlp_program():
    return _compiled("tests/programs/mlp.tp")


@pytest.fixture
def grad_program():
    return _compiled("tests/programs/quadratic_grad.tp")


@pytest.fixture
def reuse_program():
    return _compiled("tests/programs/transpose_reuse.tp")


@pytest.fixture
def rectangular_program():
    return _compiled("tests/programs/rectangular.tp")


@pytest.fixture
def random_skeleton():
    """
    Builds a seeded random skeleton. Every skeleton it returns is valid.
    """
    return _random_skeleton


@pytest.fixture
def quick_settings():
    return load_settings("tests/settings_quick.yml")
