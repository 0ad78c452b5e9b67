import numpy as np
import pytest

from tensor_programs.errors import MissingDerivative, ParseError, ProgramError
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import (
    EXTENDED,
    Comp,
    ExprDag,
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
    execute,
    expand_definition,
    interpret,
    load_program,
    parse_expression,
    parse_program,
    render_program,
    validate,
)
from tensor_programs.rng import stream


def test_parse_mlp_program(mlp_program):
    sk, cdc, _ = mlp_program
    assert len(sk) == 6
    assert [type(line) for line in sk.lines] == [VecIn, MatIn, MatIn, MatMul, Nonlin, MatMul]
    assert sk.lookup("h2") == VarId(6, VarKind.G)
    assert sk.lookup("x1").kind is VarKind.H
    assert str(sk.lookup("W1")) == "A2"
    assert dict(sk.annotations.sigma) == {sk.lookup("W2"): 1.5}
    assert [name for name, _ in sk.measures] == ["first", "second"]
    assert not sk.has_transpose
    assert validate(sk) == []


def test_render_round_trip():
    for path in (
        "tests/programs/mlp.tp",
        "tests/programs/quadratic_grad.tp",
        "tests/programs/transpose_reuse.tp",
        "tests/programs/rectangular.tp",
    ):
        sk = load_program(path)
        assert parse_program(render_program(sk)) == sk


def test_render_comments():
    sk = load_program("tests/programs/transpose_reuse.tp")
    text = render_program(sk, {4: "fresh copy"})
    assert "trans WT = W  # fresh copy" in text.splitlines()
    assert text.startswith("syntax original\n")


def test_backward_marker(grad_program):
    sk, _, _ = grad_program
    assert sk.backward_start == 4
    assert sk.name_of(sk.var(sk.backward_start)) == "v"
    assert "backward" in render_program(sk).splitlines()


def test_cdc_single_class(mlp_program):
    sk, cdc, _ = mlp_program
    assert cdc.class_ids == ("n",)
    assert cdc.as_sets(sk) == frozenset([frozenset(["x", "h1", "h2"])])
    assert cdc.class_of[sk.lookup("x1")] == "n"
    assert cdc.to_dict(sk)["matrices"] == {"W1": ["n", "n"], "W2": ["n", "n"]}


def test_cdc_rectangular(rectangular_program):
    sk, cdc, _ = rectangular_program
    assert cdc.class_ids == ("cols", "rows")
    assert cdc.class_of[sk.lookup("y")] == "rows"
    assert cdc.class_of[sk.lookup("s")] == "rows"
    assert [sk.name_of(v) for v in cdc.members("cols")] == ["x", "c"]
    with pytest.raises(ProgramError):
        cdc.members("depth")


def test_cdc_transpose_swaps_sides():
    sk = parse_program("input vec x : n\ninput mat A : m x n\ntrans AT = A\ny = A * x\nz = AT * y\n")
    cdc = compute_cdc(sk)
    assert cdc.matrix_sides[sk.lookup("AT")] == ("n", "m")
    assert cdc.class_of[sk.lookup("z")] == "n"


def test_cdc_constraints_and_fallback_names():
    sk = parse_program("input vec x\ninput vec y\n")
    assert compute_cdc(sk).class_ids == ("c1", "c2")
    sk = parse_program("input vec x\ninput vec y\nconstrain dim(x) = dim(y)\n")
    assert compute_cdc(sk).class_ids == ("c1",)


def test_cdc_conflicting_hints():
    sk = parse_program("input vec x : a\ninput vec y : b\nz = x + y\n")
    with pytest.raises(ProgramError, match="inconsistent dimension constraints"):
        compute_cdc(sk)
    assert any("inconsistent dimension constraints" in d for d in validate(sk))


def test_parse_error_location():
    with pytest.raises(ParseError) as error:
        parse_program("input vec x\ny = tanh(z)\n")
    assert error.value.line == 2
    assert error.value.column == 10
    assert str(error.value).startswith("line 2, column 10: ")


def test_parse_errors():
    with pytest.raises(ParseError, match="already defined"):
        parse_program("input vec x\ninput vec x\n")
    with pytest.raises(ParseError, match="reserved word"):
        parse_program("input vec measure\n")
    with pytest.raises(ParseError, match="syntax header must come first"):
        parse_program("input vec x\nsyntax extended\n")
    with pytest.raises(ParseError, match="unknown nonlinearity"):
        parse_program("input vec x\ny = softplus(x)\n")
    with pytest.raises(ParseError, match="empty program"):
        parse_program("# nothing\n\n")
    with pytest.raises(ParseError, match="not followed by any line"):
        parse_program("input vec x\nbackward\n")


def test_comp_requires_extended_syntax():
    text = "input vec x\ninput mat W\nh = W * x\ny = tanh(h)\nz = tanh(y)\n"
    with pytest.raises(ParseError, match="extended"):
        parse_program(text)
    sk = parse_program("syntax extended\n" + text)
    assert sk.syntax_mode == EXTENDED
    assert isinstance(sk.line(sk.lookup("z")), Comp)


def test_lincomb_coefficients():
    sk = parse_program("input vec x\ninput vec y\nz = 2 * x - 0.5 * y + x\n")
    line = sk.line(sk.lookup("z"))
    assert isinstance(line, LinComb)
    assert line.terms == ((2.0, sk.lookup("x")), (-0.5, sk.lookup("y")), (1.0, sk.lookup("x")))


def test_validate_broken_skeleton():
    sk = Skeleton([VecIn("x"), MatMul("y", VarId(3, VarKind.A), VarId(1, VarKind.G))])
    assert any("does not name an earlier line" in d for d in validate(sk))
    sk = Skeleton([VecIn("x"), Transpose("t", VarId(1, VarKind.A))])
    assert validate(sk)
    y = Nonlin("y", NonlinRef("tanh"), [VarId(1, VarKind.G)])
    sk = Skeleton([VecIn("x"), y, Comp("z", NonlinRef("tanh"), [VarId(2, VarKind.H)])])
    assert any("extended syntax" in d for d in validate(sk))


def test_expression_expands_hvars(mlp_program):
    sk, _, _ = mlp_program
    phi = parse_expression(sk, "x1 * x1")
    assert phi.leaves == (sk.lookup("h1"),)
    values = np.array([0.0, 1.0, -2.0])
    assert np.allclose(phi.evaluate({sk.lookup("h1"): values}), np.tanh(values) ** 2)


def test_expand_definition(rectangular_program):
    sk, _, _ = rectangular_program
    y = sk.lookup("y")
    s = expand_definition(sk, sk.lookup("s"))
    assert s.leaves == (y,)
    assert np.allclose(s.evaluate({y: np.array([-1.0, 2.0])}), [-1.0, 4.0])
    with pytest.raises(ProgramError, match="matrix"):
        expand_definition(sk, sk.lookup("A"))
    sk = parse_program("input vec x\ninput vec y\ns = x + 2*y\nt = tanh(s)\n")
    x, y = sk.lookup("x"), sk.lookup("y")
    assert expand_definition(sk, sk.lookup("t")).leaves == (sk.lookup("s"),)
    t = expand_definition(sk, sk.lookup("t"), through_lincomb=True)
    assert t.leaves == (x, y)
    values = {x: np.array([0.5]), y: np.array([-1.0])}
    assert np.allclose(t.evaluate(values), np.tanh(-1.5))


def test_expression_arithmetic(mlp_program):
    sk, _, _ = mlp_program
    h1 = sk.lookup("h1")
    phi = parse_expression(sk, "2 * h1 - 1")
    assert np.allclose(phi.evaluate({h1: np.array([1.0, 2.0])}), [1.0, 3.0])
    assert phi.affine_form() == (-1.0, {h1: 2.0})
    assert parse_expression(sk, "h1 ** 2 / 4").affine_form() is None
    assert parse_expression(sk, "(3 - 1) ** 3").value == 8.0
    phi = parse_expression(sk, "soft_threshold[0.5](h1)")
    assert np.allclose(phi.evaluate({h1: np.array([2.0, -0.2])}), [1.5, 0.0])


def test_expression_errors(mlp_program):
    sk, _, _ = mlp_program
    with pytest.raises(ParseError, match="division"):
        parse_expression(sk, "x / h1")
    with pytest.raises(ParseError, match="matrix"):
        parse_expression(sk, "W1 * x")
    with pytest.raises(ParseError, match="undeclared"):
        parse_expression(sk, "y * y")
    with pytest.raises(ParseError, match="empty"):
        parse_expression(sk, "  ")


def test_derivative(mlp_program):
    sk, _, _ = mlp_program
    h1 = sk.lookup("h1")
    terms = parse_expression(sk, "tanh(h1)").derivative(h1)
    assert len(terms) == 1 and terms[0].delta is None
    assert np.allclose(terms[0].weight.evaluate({h1: np.array([0.0])}), [1.0])
    assert parse_expression(sk, "tanh(h1)").derivative(sk.lookup("x")) == ()
    terms = parse_expression(sk, "relu(h1)").derivative(h1)
    second = terms[0].weight.derivative(h1)
    assert second[0].delta is not None


def test_missing_derivative(mlp_program):
    sk, _, _ = mlp_program
    phi = ExprDag.apply(NonlinRef("batchnorm_tanh", (1,)), ExprDag.leaf(sk.lookup("h1")), ExprDag.leaf(sk.lookup("x")))
    with pytest.raises(MissingDerivative):
        phi.derivative(sk.lookup("h1"))


def test_execute_and_interpret(mlp_program):
    sk, _, _ = mlp_program
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5)
    w1 = rng.standard_normal((5, 5))
    w2 = rng.standard_normal((5, 5))
    values = execute(sk, {sk.lookup("x"): x, sk.lookup("W1"): w1, sk.lookup("W2"): w2})
    assert np.allclose(values[sk.lookup("h2")], w2 @ np.tanh(w1 @ x))
    scalar = interpret(sk, {v: values[v] for v in (sk.lookup("x"), sk.lookup("h1"), sk.lookup("h2"))})
    assert np.allclose(scalar[sk.lookup("x1")], np.tanh(values[sk.lookup("h1")]))
    with pytest.raises(ProgramError, match="no value supplied"):
        execute(sk, {sk.lookup("x"): x})


def test_random_programs_render_and_parse_back(random_skeleton):
    for seed in range(40):
        sk = random_skeleton(seed, size=12, extended=seed % 2 == 1, transposes=seed % 3 == 0, matrices=2)
        assert validate(sk) == []
        assert parse_program(render_program(sk)) == sk


def test_comp_needs_an_hvar_argument():
    x, y = VarId(1, VarKind.G), VarId(2, VarKind.G)
    for fn, args in ((NonlinRef("tanh"), [x]), (NonlinRef("lincomb", [1.0, 2.0]), [x, y])):
        sk = Skeleton([VecIn("x"), VecIn("y"), Comp("z", fn, args)], EXTENDED)
        assert any("without H-var arguments" in d for d in validate(sk))


def _brute_force_components(sk, extra=()):
    # every vector and matrix side is a node, joined to those sharing its width
    nodes = set()
    edges = []
    for i, line in enumerate(sk.lines, 1):
        if line.kind is VarKind.A:
            nodes |= {("rows", i), ("cols", i)}
        else:
            nodes.add(("var", i))
        if isinstance(line, Transpose):
            source = line.source.line_number
            edges += [(("cols", source), ("rows", i)), (("rows", source), ("cols", i))]
        elif isinstance(line, MatMul):
            matrix = line.matrix.line_number
            edges += [(("rows", matrix), ("var", i)), (("cols", matrix), ("var", line.vector.line_number))]
        elif isinstance(line, (LinComb, Nonlin, Comp)):
            edges += [(("var", i), ("var", arg.line_number)) for arg in line.arguments()]
    edges += [(("var", a.line_number), ("var", b.line_number)) for a, b in extra]
    component = {node: node for node in nodes}
    changed = True
    while changed:
        changed = False
        for a, b in edges:
            low = min(component[a], component[b])
            for node in (a, b):
                if component[node] != low:
                    component[node] = low
                    changed = True
    return component


def _random_pairs(sk, rng, count):
    gvars = sk.variables(VarKind.G)
    return [(gvars[int(rng.integers(len(gvars)))], gvars[int(rng.integers(len(gvars)))]) for _ in range(count)]


def test_cdc_matches_brute_force_closure(random_skeleton):
    rng = stream(21)
    for seed in range(30):
        sk = random_skeleton(seed, size=int(rng.integers(4, 13)), extended=seed % 2 == 0, transposes=True, matrices=2)
        extra = _random_pairs(sk, rng, int(rng.integers(0, 3)))
        cdc = compute_cdc(sk, extra)
        component = _brute_force_components(sk, extra)
        assigned = {}
        for i, line in enumerate(sk.lines, 1):
            var = VarId(i, line.kind)
            if line.kind is VarKind.A:
                assigned[("rows", i)], assigned[("cols", i)] = cdc.matrix_sides[var]
            else:
                assigned[("var", i)] = cdc.class_of[var]
        for a in component:
            for b in component:
                assert (component[a] == component[b]) == (assigned[a] == assigned[b])
        groups = {}
        for var in sk.variables(VarKind.G):
            groups.setdefault(component[("var", var.line_number)], set()).add(sk.name_of(var))
        assert cdc.as_sets(sk) == frozenset(frozenset(g) for g in groups.values())


def _renumbered(line, position):
    def move(v):
        return VarId(position[v.line_number], v.kind)

    if isinstance(line, Transpose):
        return Transpose(line.name, move(line.source))
    if isinstance(line, MatMul):
        return MatMul(line.name, move(line.matrix), move(line.vector))
    if isinstance(line, LinComb):
        return LinComb(line.name, [(c, move(v)) for c, v in line.terms])
    if isinstance(line, (Nonlin, Comp)):
        return type(line)(line.name, line.fn, [move(a) for a in line.args])
    return line


def test_cdc_ignores_constraint_and_input_order(random_skeleton):
    rng = stream(22)
    for seed in range(15):
        sk = random_skeleton(seed, size=12, extended=seed % 2 == 1, transposes=True, vectors=3, matrices=2)
        pairs = _random_pairs(sk, rng, 3)
        reference = compute_cdc(sk, pairs).as_sets(sk)
        shuffled = [pairs[i][::-1] for i in rng.permutation(len(pairs))]
        assert compute_cdc(sk, shuffled).as_sets(sk) == reference
        order = rng.permutation(5)
        position = {int(old) + 1: new for new, old in enumerate(order, 1)}
        position.update({i: i for i in range(6, len(sk) + 1)})
        lines = [sk.lines[int(old)] for old in order] + [_renumbered(line, position) for line in sk.lines[5:]]
        permuted = Skeleton(lines, sk.syntax_mode)
        assert validate(permuted) == []
        moved = [(VarId(position[a.line_number], a.kind), VarId(position[b.line_number], b.kind)) for a, b in pairs]
        assert compute_cdc(permuted, moved).as_sets(permuted) == reference


def test_expansion_agrees_with_interpreter(random_skeleton):
    rng = stream(23)
    for seed in range(20):
        sk = random_skeleton(seed, size=10, extended=seed % 2 == 1, transposes=seed % 4 == 0)
        roots = [v for v in sk.variables(VarKind.G) if isinstance(sk.line(v), (VecIn, MatMul))]
        env = interpret(sk, {v: rng.standard_normal(7) for v in roots})
        for var in sk.variables():
            if var.kind is VarKind.A:
                continue
            for through_lincomb in (False, True):
                expr = expand_definition(sk, var, through_lincomb)
                if through_lincomb:
                    assert set(expr.leaves) <= set(roots)
                value = np.broadcast_to(expr.evaluate({leaf: env[leaf] for leaf in expr.leaves}), (7,))
                assert np.allclose(value, env[var])
