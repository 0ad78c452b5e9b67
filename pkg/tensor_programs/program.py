"""
Tensor program intermediate representation.

A program is a straight-line list of typed lines. Every line defines exactly
one variable, referred to elsewhere by a ``VarId`` carrying the 1-based line
number and the variable kind (G for Gaussian vectors, H for images of
coordinatewise functions and A for matrices).
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_programs import nonlinearities
from tensor_programs.errors import MissingDerivative, ParseError, ProgramError
from tensor_programs.nonlinearities import NonlinRef

log = logging.getLogger(__name__)

ORIGINAL = "original"
EXTENDED = "extended"
SYNTAX_MODES = (ORIGINAL, EXTENDED)

KEYWORDS = frozenset(["syntax", "input", "trans", "constrain", "sigma", "mean", "cov", "ratio", "backward", "measure"])

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_NAME_RE = re.compile(_NAME)


class VarKind(Enum):
    G = "G"
    H = "H"
    A = "A"


@dataclass(frozen=True)
class VarId:
    line_number: int
    kind: VarKind

    def __lt__(self, other):
        return (self.line_number, self.kind.value) < (other.line_number, other.kind.value)

    def __str__(self):
        prefix = "A" if self.kind is VarKind.A else self.kind.value.lower()
        return f"{prefix}{self.line_number}"


@dataclass(frozen=True)
class VecIn:
    name: str
    cdc_hint: Optional[str] = None

    kind = VarKind.G

    def arguments(self) -> Tuple[VarId, ...]:
        return ()


@dataclass(frozen=True)
class MatIn:
    name: str
    rows_hint: Optional[str] = None
    cols_hint: Optional[str] = None

    kind = VarKind.A

    def arguments(self) -> Tuple[VarId, ...]:
        return ()


@dataclass(frozen=True)
class Transpose:
    name: str
    source: VarId

    kind = VarKind.A

    def arguments(self) -> Tuple[VarId, ...]:
        return (self.source,)


@dataclass(frozen=True)
class MatMul:
    name: str
    matrix: VarId
    vector: VarId

    kind = VarKind.G

    def arguments(self) -> Tuple[VarId, ...]:
        return (self.matrix, self.vector)


@dataclass(frozen=True)
class LinComb:
    name: str
    terms: Tuple[Tuple[float, VarId], ...]

    kind = VarKind.G

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((float(c), v) for c, v in self.terms))

    def arguments(self) -> Tuple[VarId, ...]:
        return tuple(v for _, v in self.terms)


@dataclass(frozen=True)
class Nonlin:
    name: str
    fn: NonlinRef
    args: Tuple[VarId, ...]

    kind = VarKind.H

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))

    def arguments(self) -> Tuple[VarId, ...]:
        return self.args


@dataclass(frozen=True)
class Comp:
    """
    Extended-syntax line: a registered function applied to G- and H-vars.
    """

    name: str
    fn: NonlinRef
    args: Tuple[VarId, ...]

    kind = VarKind.H

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))

    def arguments(self) -> Tuple[VarId, ...]:
        return self.args


Line = Union[VecIn, MatIn, Transpose, MatMul, LinComb, Nonlin, Comp]


@dataclass(frozen=True)
class Annotations:
    """
    Sampling data written next to the program: standard deviations of input
    matrices, means and covariances of input vectors and width ratios between
    dimension classes.
    """

    sigma: Tuple[Tuple[VarId, float], ...] = ()
    mean: Tuple[Tuple[VarId, float], ...] = ()
    cov: Tuple[Tuple[VarId, VarId, float], ...] = ()
    ratio: Tuple[Tuple[str, str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple((v, float(x)) for v, x in self.sigma))
        object.__setattr__(self, "mean", tuple((v, float(x)) for v, x in self.mean))
        object.__setattr__(self, "cov", tuple((a, b, float(x)) for a, b, x in self.cov))
        object.__setattr__(self, "ratio", tuple((a, b, float(x)) for a, b, x in self.ratio))

    def restricted(self, last_line: int) -> "Annotations":
        def keep(*variables):
            return all(v.line_number <= last_line for v in variables)

        return Annotations(
            sigma=[(v, x) for v, x in self.sigma if keep(v)],
            mean=[(v, x) for v, x in self.mean if keep(v)],
            cov=[(a, b, x) for a, b, x in self.cov if keep(a, b)],
            ratio=self.ratio,
        )


@dataclass(frozen=True)
class Skeleton:
    lines: Tuple[Line, ...]
    syntax_mode: str = ORIGINAL
    constraints: Tuple[Tuple[VarId, VarId], ...] = ()
    annotations: Annotations = field(default_factory=Annotations)
    backward_start: Optional[int] = None
    measures: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "constraints", tuple(tuple(c) for c in self.constraints))
        object.__setattr__(self, "measures", tuple(tuple(m) for m in self.measures))

    def __len__(self):
        return len(self.lines)

    def var(self, line_number: int) -> VarId:
        return VarId(line_number, self.lines[line_number - 1].kind)

    def line(self, var: VarId) -> Line:
        return self.lines[var.line_number - 1]

    def name_of(self, var: VarId) -> str:
        return self.line(var).name

    @cached_property
    def _names(self) -> Dict[str, VarId]:
        return {line.name: VarId(i, line.kind) for i, line in enumerate(self.lines, 1)}

    def lookup(self, name: str) -> VarId:
        try:
            return self._names[name]
        except KeyError:
            raise ProgramError(f"undeclared variable '{name}'") from None

    def variables(self, kind: Optional[VarKind] = None) -> List[VarId]:
        return [VarId(i, line.kind) for i, line in enumerate(self.lines, 1) if kind is None or line.kind is kind]

    @property
    def has_transpose(self) -> bool:
        return any(isinstance(line, Transpose) for line in self.lines)

    def prefix(self, count: int) -> "Skeleton":
        """
        The program made of the first ``count`` lines, with every annotation
        that only refers to them.
        """
        return Skeleton(
            self.lines[:count],
            self.syntax_mode,
            [c for c in self.constraints if max(v.line_number for v in c) <= count],
            self.annotations.restricted(count),
            None,
            (),
        )


# dimension constraint closure


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, node):
        self.parent.setdefault(node, node)

    def find(self, node):
        self.add(node)
        while self.parent[node] != node:
            self.parent[node] = self.parent[self.parent[node]]
            node = self.parent[node]
        return node

    def union(self, a, b):
        root_a, root_b = self.find(a), self.find(b)
        if root_a != root_b:
            self.parent[root_b] = root_a


def _closure(sk: Skeleton, pairs: Iterable[Tuple[VarId, VarId]]) -> _UnionFind:
    uf = _UnionFind()
    for i, line in enumerate(sk.lines, 1):
        if isinstance(line, MatIn):
            uf.add(("rows", i))
            uf.add(("cols", i))
            if line.rows_hint:
                uf.union(("label", line.rows_hint), ("rows", i))
            if line.cols_hint:
                uf.union(("label", line.cols_hint), ("cols", i))
        elif isinstance(line, Transpose):
            uf.union(("cols", line.source.line_number), ("rows", i))
            uf.union(("rows", line.source.line_number), ("cols", i))
        else:
            uf.add(("var", i))
            if isinstance(line, VecIn) and line.cdc_hint:
                uf.union(("label", line.cdc_hint), ("var", i))
            elif isinstance(line, MatMul):
                uf.union(("rows", line.matrix.line_number), ("var", i))
                uf.union(("cols", line.matrix.line_number), ("var", line.vector.line_number))
            elif not isinstance(line, VecIn):
                for arg in line.arguments():
                    uf.union(("var", i), ("var", arg.line_number))
    for a, b in pairs:
        uf.union(("var", a.line_number), ("var", b.line_number))
    return uf


def _label_conflicts(uf: _UnionFind) -> List[Tuple[str, ...]]:
    labels: Dict[object, List[str]] = {}
    for node in list(uf.parent):
        if node[0] == "label":
            labels.setdefault(uf.find(node), []).append(node[1])
    return [tuple(sorted(names)) for names in labels.values() if len(names) > 1]


@dataclass(frozen=True)
class CdcPartition:
    """
    Dimension classes of a program.

    ``classes`` lists the G-vars of every class in line order, including
    classes that only appear as a matrix side and therefore have no member.
    ``class_of`` covers both G- and H-vars.
    """

    class_of: Mapping[VarId, str]
    classes: Mapping[str, Tuple[VarId, ...]]
    matrix_sides: Mapping[VarId, Tuple[str, str]]

    def members(self, cls: str) -> Tuple[VarId, ...]:
        try:
            return self.classes[cls]
        except KeyError:
            raise ProgramError(f"unknown dimension class '{cls}'") from None

    @property
    def class_ids(self) -> Tuple[str, ...]:
        return tuple(sorted(self.classes))

    def as_sets(self, sk: Skeleton) -> frozenset:
        return frozenset(frozenset(sk.name_of(v) for v in members) for members in self.classes.values() if members)

    def to_dict(self, sk: Skeleton) -> dict:
        return {
            "classes": {c: [sk.name_of(v) for v in self.classes[c]] for c in self.class_ids},
            "matrices": {sk.name_of(a): list(sides) for a, sides in sorted(self.matrix_sides.items())},
        }


def compute_cdc(sk: Skeleton, extra: Sequence[Tuple[VarId, VarId]] = ()) -> CdcPartition:
    """
    Smallest equivalence relation on G-vars closed under the dimension
    constraints implied by the program, its ``constrain`` directives and
    ``extra``.
    """
    uf = _closure(sk, list(sk.constraints) + list(extra))
    conflicts = _label_conflicts(uf)
    if conflicts:
        raise ProgramError(f"inconsistent dimension constraints: {', '.join(map(str, conflicts))}")
    labels = {}
    for node in uf.parent:
        if node[0] == "label":
            labels[uf.find(node)] = node[1]
    names = {}
    used = set(labels.values())

    def class_name(root, fallback):
        if root in labels:
            return labels[root]
        if root not in names:
            name = fallback
            while name in used:
                name += "_"
            used.add(name)
            names[root] = name
        return names[root]

    class_of = {}
    classes: Dict[str, List[VarId]] = {}
    sides = {}
    for i, line in enumerate(sk.lines, 1):
        var = VarId(i, line.kind)
        if line.kind is VarKind.A:
            rows = class_name(uf.find(("rows", i)), f"c{i}_rows")
            cols = class_name(uf.find(("cols", i)), f"c{i}_cols")
            sides[var] = (rows, cols)
            classes.setdefault(rows, [])
            classes.setdefault(cols, [])
            continue
        cls = class_name(uf.find(("var", i)), f"c{i}")
        class_of[var] = cls
        members = classes.setdefault(cls, [])
        if line.kind is VarKind.G:
            members.append(var)
    return CdcPartition(
        MappingProxyType(class_of),
        MappingProxyType({c: tuple(m) for c, m in classes.items()}),
        MappingProxyType(sides),
    )


# expressions


class ExprDag:
    """
    Immutable expression over G-var leaves.

    Nodes are leaves, constants or applications of a registered function.
    Equal sub-expressions compare and hash equal, which lets them be shared
    and cached.
    """

    __slots__ = ("op", "var", "value", "fn", "children", "_hash", "_leaves")

    def __init__(self, op, var=None, value=0.0, fn=None, children=()):
        self.op = op
        self.var = var
        self.value = float(value)
        self.fn = fn
        self.children = tuple(children)
        self._hash = hash((op, var, self.value, fn, self.children))
        self._leaves = None

    @classmethod
    def leaf(cls, var: VarId) -> "ExprDag":
        return cls("leaf", var=var)

    @classmethod
    def const(cls, value: float) -> "ExprDag":
        return cls("const", value=value)

    @classmethod
    def apply(cls, fn: Union[NonlinRef, str], *children: "ExprDag") -> "ExprDag":
        if isinstance(fn, str):
            fn = NonlinRef(fn)
        return cls("apply", fn=fn, children=children)

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, ExprDag) or self._hash != other._hash:
            return False
        return (self.op, self.var, self.value, self.fn, self.children) == (
            other.op,
            other.var,
            other.value,
            other.fn,
            other.children,
        )

    def __hash__(self):
        return self._hash

    def __repr__(self):
        if self.op == "leaf":
            return str(self.var)
        if self.op == "const":
            return format(self.value, "g")
        return f"{self.fn}({', '.join(map(repr, self.children))})"

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def leaves(self) -> Tuple[VarId, ...]:
        if self._leaves is None:
            found = set()
            seen = set()
            stack = [self]
            while stack:
                node = stack.pop()
                if id(node) in seen:
                    continue
                seen.add(id(node))
                if node.op == "leaf":
                    found.add(node.var)
                stack.extend(node.children)
            self._leaves = tuple(sorted(found))
        return self._leaves

    def evaluate(self, values: Mapping[VarId, object]):
        memo = {}

        def visit(node):
            key = id(node)
            if key not in memo:
                if node.op == "leaf":
                    try:
                        memo[key] = values[node.var]
                    except KeyError:
                        raise ProgramError(f"no value supplied for leaf {node.var}") from None
                elif node.op == "const":
                    memo[key] = node.value
                else:
                    args = [visit(child) for child in node.children]
                    memo[key] = nonlinearities.apply_nonlinearity(node.fn, *args)
            return memo[key]

        return visit(self)

    def substitute(self, mapping: Mapping[VarId, "ExprDag"]) -> "ExprDag":
        memo = {}

        def visit(node):
            key = id(node)
            if key not in memo:
                if node.op == "leaf":
                    memo[key] = mapping.get(node.var, node)
                elif node.op == "const":
                    memo[key] = node
                else:
                    children = [visit(child) for child in node.children]
                    if all(a is b for a, b in zip(children, node.children)):
                        memo[key] = node
                    else:
                        memo[key] = ExprDag.apply(node.fn, *children)
            return memo[key]

        return visit(self)

    def affine_form(self) -> Optional[Tuple[float, Dict[VarId, float]]]:
        """
        ``(c, b)`` such that the expression equals ``c + sum(b[v] * v)``, or
        ``None`` when it is not affine in its leaves.
        """
        memo = {}

        def visit(node):
            key = id(node)
            if key in memo:
                return memo[key]
            if node.op == "leaf":
                result = (0.0, {node.var: 1.0})
            elif node.op == "const":
                result = (node.value, {})
            else:
                result = _affine_apply(node, [visit(child) for child in node.children])
            memo[key] = result
            return result

        return visit(self)

    def derivative(self, wrt: VarId) -> Tuple["DerivativeTerm", ...]:
        """
        Symbolic partial derivative in the leaf ``wrt``.

        Raises ``MissingDerivative`` when a function on the path to ``wrt``
        has no registered derivative.
        """
        memo = {}

        def visit(node):
            key = id(node)
            if key in memo:
                return memo[key]
            if node.op == "leaf":
                result = (DerivativeTerm(ExprDag.const(1.0)),) if node.var == wrt else ()
            elif node.op == "const":
                result = ()
            else:
                result = _chain_rule(node, [visit(child) for child in node.children])
            memo[key] = result
            return result

        return visit(self)


@dataclass(frozen=True)
class DerivativeTerm:
    """
    ``weight`` alone, or ``weight * delta(delta)`` when ``delta`` is set.
    """

    weight: ExprDag
    delta: Optional[ExprDag] = None


def _affine_apply(node, forms):
    if any(form is None for form in forms):
        return None
    name = node.fn.name
    if name == "id":
        return forms[0]
    if name == "shift":
        const, coeffs = forms[0]
        return const + node.fn.params[0], coeffs
    if name == "lincomb":
        const = 0.0
        coeffs: Dict[VarId, float] = {}
        for weight, (c, b) in zip(node.fn.params, forms):
            const += weight * c
            for var, value in b.items():
                coeffs[var] = coeffs.get(var, 0.0) + weight * value
        return const, coeffs
    variable = [form for form in forms if form[1]]
    if name == "mul" and len(variable) <= 1:
        scale = 1.0
        for form in forms:
            if not form[1]:
                scale *= form[0]
        if not variable:
            return scale, {}
        const, coeffs = variable[0]
        return scale * const, {var: scale * value for var, value in coeffs.items()}
    if not variable:
        value = nonlinearities.apply_nonlinearity(node.fn, *[c for c, _ in forms])
        return float(value), {}
    return None


def _instantiate(template, args):
    tag = template[0]
    if tag == "const":
        return ExprDag.const(template[1])
    if tag == "arg":
        return args[template[1]]
    _, name, params, children = template
    return simplified_apply(NonlinRef(name, params), [_instantiate(t, args) for t in children])


def simplified_apply(fn: NonlinRef, children: Sequence[ExprDag]) -> ExprDag:
    """
    ``ExprDag.apply`` with constant folding and unit factors removed from
    products.
    """
    if children and all(child.is_const for child in children):
        value = nonlinearities.apply_nonlinearity(fn, *[child.value for child in children])
        return ExprDag.const(float(value))
    if fn.name == "mul":
        if any(child.is_const and child.value == 0.0 for child in children):
            return ExprDag.const(0.0)
        kept = [child for child in children if not (child.is_const and child.value == 1.0)]
        if not kept:
            return ExprDag.const(1.0)
        if len(kept) == 1:
            return kept[0]
        children = kept
    return ExprDag.apply(fn, *children)


def _product(a: ExprDag, b: ExprDag) -> ExprDag:
    return simplified_apply(NonlinRef("mul"), [a, b])


def _chain_rule(node, inner_terms):
    terms = []
    for index, inner in enumerate(inner_terms):
        if not inner:
            continue
        templates = nonlinearities.partial_templates(node.fn, index, len(node.children))
        if templates is None:
            raise MissingDerivative(f"'{node.fn}' has no registered derivative in argument {index + 1}")
        for weight_template, delta_template in templates:
            weight = _instantiate(weight_template, node.children)
            delta = None if delta_template is None else _instantiate(delta_template, node.children)
            for term in inner:
                if delta is not None and term.delta is not None:
                    raise MissingDerivative("product of two Dirac masses")
                product = _product(weight, term.weight)
                if product.is_const and product.value == 0.0:
                    continue
                terms.append(DerivativeTerm(product, delta if delta is not None else term.delta))
    return tuple(terms)


def expand_lines(lines: Sequence[Line], var: VarId, through_lincomb: bool = False) -> ExprDag:
    """
    Expression for ``var`` in terms of G-var leaves.

    Expansion stops at G-vars unless ``through_lincomb`` is set, in which
    case linear combinations are expanded too and the leaves are input
    vectors and matrix products only.
    """
    memo: Dict[int, ExprDag] = {}

    def visit(v):
        if v.line_number in memo:
            return memo[v.line_number]
        line = lines[v.line_number - 1]
        if line.kind is VarKind.A:
            raise ProgramError(f"cannot expand matrix variable '{line.name}'")
        if isinstance(line, LinComb) and through_lincomb:
            params = tuple(c for c, _ in line.terms)
            result = ExprDag.apply(NonlinRef("lincomb", params), *[visit(t) for _, t in line.terms])
        elif line.kind is VarKind.G:
            result = ExprDag.leaf(VarId(v.line_number, VarKind.G))
        else:
            result = ExprDag.apply(line.fn, *[visit(arg) for arg in line.args])
        memo[v.line_number] = result
        return result

    return visit(var)


def expand_definition(sk: Skeleton, var: VarId, through_lincomb: bool = False) -> ExprDag:
    return expand_lines(sk.lines, var, through_lincomb)


# evaluation


def evaluate_line(line: Line, env: Mapping[VarId, object]) -> np.ndarray:
    """
    Value of a LinComb, Nonlin or Comp line given the values of its
    arguments.
    """
    if isinstance(line, LinComb):
        return sum(c * np.asarray(env[v], dtype=float) for c, v in line.terms)
    if isinstance(line, (Nonlin, Comp)):
        return nonlinearities.apply_nonlinearity(line.fn, *[env[arg] for arg in line.args])
    raise ProgramError(f"line '{line.name}' is not computed coordinatewise")


def interpret(sk: Skeleton, gvalues: Mapping[VarId, object]) -> Dict[VarId, np.ndarray]:
    """
    Scalar interpreter: given values for the input vectors and matrix
    products, computes every other G- and H-var.
    """
    env: Dict[VarId, np.ndarray] = {}
    for i, line in enumerate(sk.lines, 1):
        var = VarId(i, line.kind)
        if line.kind is VarKind.A:
            continue
        if var in gvalues and line.kind is VarKind.G:
            env[var] = np.asarray(gvalues[var], dtype=float)
        elif isinstance(line, (VecIn, MatMul)):
            raise ProgramError(f"no value supplied for '{line.name}'")
        else:
            env[var] = evaluate_line(line, env)
    return env


def execute(sk: Skeleton, inputs: Mapping[VarId, np.ndarray]) -> Dict[VarId, np.ndarray]:
    """
    Runs the program on concrete input vectors and matrices.
    """
    env: Dict[VarId, np.ndarray] = {}
    for i, line in enumerate(sk.lines, 1):
        var = VarId(i, line.kind)
        if isinstance(line, (VecIn, MatIn)):
            try:
                env[var] = inputs[var]
            except KeyError:
                raise ProgramError(f"no value supplied for input '{line.name}'") from None
        elif isinstance(line, Transpose):
            env[var] = env[line.source].T
        elif isinstance(line, MatMul):
            env[var] = env[line.matrix] @ env[line.vector]
        else:
            env[var] = evaluate_line(line, env)
    return env


# validation


def validate(sk: Skeleton) -> List[str]:
    """
    Human-readable diagnostics, empty when the program is well formed.
    """
    if not sk.lines:
        return ["empty program"]
    diagnostics = []
    if sk.syntax_mode not in SYNTAX_MODES:
        diagnostics.append(f"unknown syntax mode '{sk.syntax_mode}'")
    seen = set()
    for i, line in enumerate(sk.lines, 1):
        where = f"line {i} ('{line.name}')"
        if not _NAME_RE.fullmatch(line.name) or line.name in KEYWORDS:
            diagnostics.append(f"{where}: invalid variable name")
        if line.name in seen:
            diagnostics.append(f"{where}: duplicate variable name")
        seen.add(line.name)
        broken = False
        for arg in line.arguments():
            if not 1 <= arg.line_number < i:
                diagnostics.append(f"{where}: reference {arg} does not name an earlier line")
                broken = True
            elif sk.lines[arg.line_number - 1].kind is not arg.kind:
                diagnostics.append(f"{where}: reference {arg} has the wrong kind")
                broken = True
        if broken:
            continue
        diagnostics.extend(f"{where}: {message}" for message in _line_diagnostics(sk, line))
    diagnostics.extend(_directive_diagnostics(sk))
    if diagnostics:
        return diagnostics
    for labels in _label_conflicts(_closure(sk, sk.constraints)):
        diagnostics.append(f"inconsistent dimension constraints: classes {', '.join(labels)} are forced equal")
    for name, text in sk.measures:
        try:
            parse_expression(sk, text)
        except ProgramError as error:
            diagnostics.append(f"measure '{name}': {error}")
    return diagnostics


def _line_diagnostics(sk, line):
    if isinstance(line, MatIn):
        if bool(line.rows_hint) != bool(line.cols_hint):
            yield "matrix dimension hints must name both sides"
    elif isinstance(line, Transpose):
        if line.source.kind is not VarKind.A:
            yield "transpose requires an A-var"
    elif isinstance(line, MatMul):
        if line.matrix.kind is not VarKind.A:
            yield "matrix product requires an A-var on the left"
        if line.vector.kind is VarKind.A:
            yield "matrix product requires a vector on the right"
    elif isinstance(line, LinComb):
        if not line.terms:
            yield "empty linear combination"
        if any(v.kind is not VarKind.G for v in line.arguments()):
            yield "linear combination of non-G variables"
    elif isinstance(line, (Nonlin, Comp)):
        if any(v.kind is VarKind.A for v in line.args):
            yield "nonlinearity applied to an A-var"
        if isinstance(line, Nonlin) and any(v.kind is VarKind.H for v in line.args):
            yield "Nonlin arguments must be G-vars"
        if isinstance(line, Comp) and sk.syntax_mode != EXTENDED:
            yield "Comp line requires extended syntax"
        if isinstance(line, Comp) and all(v.kind is VarKind.G for v in line.args):
            yield "Comp line without H-var arguments, write it as a Nonlin or linear combination"
        message = nonlinearities.check_reference(line.fn, len(line.args))
        if message:
            yield message


def _directive_diagnostics(sk):
    count = len(sk.lines)

    def defined(v, kinds):
        return 1 <= v.line_number <= count and sk.lines[v.line_number - 1].kind in kinds

    for a, b in sk.constraints:
        if not (defined(a, (VarKind.G,)) and defined(b, (VarKind.G,))):
            yield "dimension constraints must relate two G-vars"
    for v, value in sk.annotations.sigma:
        if not defined(v, (VarKind.A,)) or not isinstance(sk.line(v), MatIn):
            yield f"sigma annotation on {v} which is not an input matrix"
        elif value < 0:
            yield f"negative sigma for '{sk.name_of(v)}'"
    for v, _ in sk.annotations.mean:
        if not defined(v, (VarKind.G,)) or not isinstance(sk.line(v), VecIn):
            yield f"mean annotation on {v} which is not an input vector"
    for a, b, _ in sk.annotations.cov:
        for v in (a, b):
            if not defined(v, (VarKind.G,)) or not isinstance(sk.line(v), VecIn):
                yield f"cov annotation on {v} which is not an input vector"
    for a, b, value in sk.annotations.ratio:
        if value <= 0:
            yield f"ratio {a} / {b} must be positive"
    if sk.backward_start is not None and not 2 <= sk.backward_start <= count:
        yield "backward marker must separate two non-empty parts"


# DSL


_SYNTAX_RE = re.compile(r"syntax\s+(\w+)$")
_VEC_RE = re.compile(rf"input\s+vec\s+({_NAME})(?:\s*:\s*({_NAME}))?$")
_MAT_RE = re.compile(rf"input\s+mat\s+({_NAME})(?:\s*:\s*({_NAME})\s+x\s+({_NAME}))?$")
_TRANS_RE = re.compile(rf"trans\s+({_NAME})\s*=\s*({_NAME})$")
_CONSTRAIN_RE = re.compile(rf"constrain\s+dim\(\s*({_NAME})\s*\)\s*=\s*dim\(\s*({_NAME})\s*\)$")
_SCALAR_RE = re.compile(rf"(sigma|mean)\s+({_NAME})\s*=\s*({_NUMBER})$")
_COV_RE = re.compile(rf"cov\s+({_NAME})\s+({_NAME})\s*=\s*({_NUMBER})$")
_RATIO_RE = re.compile(rf"ratio\s+({_NAME})\s*/\s*({_NAME})\s*=\s*({_NUMBER})$")
_MEASURE_RE = re.compile(rf"measure\s+({_NAME})\s*=\s*(.+)$")
_ASSIGN_RE = re.compile(rf"({_NAME})\s*=\s*(.+)$")
_MATMUL_RE = re.compile(rf"({_NAME})\s*\*\s*({_NAME})$")
_CALL_RE = re.compile(rf"({_NAME})\s*(?:\[([^\]]*)\])?\s*\((.*)\)$")
_TERM_RE = re.compile(rf"\s*([+-])?\s*(?:({_NUMBER})\s*\*\s*)?({_NAME})\s*")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.lines: List[Line] = []
        self.names: Dict[str, VarId] = {}
        self.syntax_mode = ORIGINAL
        self.constraints = []
        self.sigma = []
        self.mean = []
        self.cov = []
        self.ratio = []
        self.measures = []
        self.measure_lines = []
        self.backward_start = None
        self.statements = 0
        self.lineno = 0
        self.raw = ""

    def error(self, message, token=None):
        column = None
        if token is not None and token in self.raw:
            column = self.raw.index(token) + 1
        raise ParseError(message, self.lineno, column)

    def resolve(self, name, kinds=None, what="variable"):
        if name not in self.names:
            self.error(f"undeclared variable '{name}'", name)
        var = self.names[name]
        if kinds is not None and var.kind not in kinds:
            self.error(f"'{name}' is not {what}", name)
        return var

    def number(self, token):
        value = float(token)
        if not np.isfinite(value):
            self.error(f"non-finite number '{token}'", token)
        return value

    def define(self, line):
        if line.name in KEYWORDS:
            self.error(f"'{line.name}' is a reserved word", line.name)
        if line.name in self.names:
            self.error(f"variable '{line.name}' is already defined", line.name)
        self.lines.append(line)
        self.names[line.name] = VarId(len(self.lines), line.kind)

    def parse(self) -> Skeleton:
        for self.lineno, self.raw in enumerate(self.text.splitlines(), 1):
            statement = self.raw.split("#", 1)[0].strip()
            if statement:
                self.statement(statement)
                self.statements += 1
        if not self.lines:
            raise ParseError("empty program")
        if self.backward_start is not None and self.backward_start > len(self.lines):
            raise ParseError("backward marker is not followed by any line")
        sk = Skeleton(
            self.lines,
            self.syntax_mode,
            self.constraints,
            Annotations(self.sigma, self.mean, self.cov, self.ratio),
            self.backward_start,
            self.measures,
        )
        for (name, text), lineno in zip(self.measures, self.measure_lines):
            try:
                parse_expression(sk, text)
            except ProgramError as error:
                raise ParseError(f"measure '{name}': {error}", lineno) from None
        return sk

    def statement(self, statement):
        keyword = statement.split()[0]
        if keyword == "syntax":
            match = _SYNTAX_RE.match(statement)
            if not match or match.group(1) not in SYNTAX_MODES:
                self.error("syntax must be 'original' or 'extended'")
            if self.statements:
                self.error("syntax header must come first")
            self.syntax_mode = match.group(1)
        elif keyword == "input":
            self.input(statement)
        elif keyword == "trans":
            match = _TRANS_RE.match(statement)
            if not match:
                self.error("expected 'trans NAME = NAME'")
            source = self.resolve(match.group(2), (VarKind.A,), "a matrix")
            self.define(Transpose(match.group(1), source))
        elif keyword == "constrain":
            match = _CONSTRAIN_RE.match(statement)
            if not match:
                self.error("expected 'constrain dim(NAME) = dim(NAME)'")
            pair = tuple(self.resolve(n, (VarKind.G,), "a G-var") for n in match.groups())
            self.constraints.append(pair)
        elif keyword in ("sigma", "mean"):
            self.scalar(statement)
        elif keyword == "cov":
            match = _COV_RE.match(statement)
            if not match:
                self.error("expected 'cov NAME NAME = NUMBER'")
            a, b = (self.input_vector(n) for n in match.group(1, 2))
            self.cov.append((a, b, self.number(match.group(3))))
        elif keyword == "ratio":
            match = _RATIO_RE.match(statement)
            if not match:
                self.error("expected 'ratio CLASS / CLASS = NUMBER'")
            value = self.number(match.group(3))
            if value <= 0:
                self.error("ratios must be positive", match.group(3))
            self.ratio.append((match.group(1), match.group(2), value))
        elif keyword == "backward":
            if statement != "backward":
                self.error("unexpected text after 'backward'")
            if self.backward_start is not None:
                self.error("duplicate backward marker")
            if not self.lines:
                self.error("backward marker before any line")
            self.backward_start = len(self.lines) + 1
        elif keyword == "measure":
            match = _MEASURE_RE.match(statement)
            if not match:
                self.error("expected 'measure NAME = EXPRESSION'")
            self.measures.append((match.group(1), match.group(2).strip()))
            self.measure_lines.append(self.lineno)
        else:
            self.assignment(statement)

    def input(self, statement):
        match = _VEC_RE.match(statement)
        if match:
            self.define(VecIn(match.group(1), match.group(2)))
            return
        match = _MAT_RE.match(statement)
        if match:
            self.define(MatIn(*match.groups()))
            return
        self.error("expected 'input vec NAME [: CLASS]' or 'input mat NAME [: CLASS x CLASS]'")

    def input_vector(self, name):
        var = self.resolve(name, (VarKind.G,), "an input vector")
        if not isinstance(self.lines[var.line_number - 1], VecIn):
            self.error(f"'{name}' is not an input vector", name)
        return var

    def scalar(self, statement):
        match = _SCALAR_RE.match(statement)
        if not match:
            self.error(f"expected '{statement.split()[0]} NAME = NUMBER'")
        keyword, name, token = match.groups()
        value = self.number(token)
        if keyword == "mean":
            self.mean.append((self.input_vector(name), value))
            return
        var = self.resolve(name, (VarKind.A,), "a matrix")
        if not isinstance(self.lines[var.line_number - 1], MatIn):
            self.error("sigma of a transposed matrix follows its source", name)
        if value < 0:
            self.error("sigma must be non-negative", token)
        self.sigma.append((var, value))

    def assignment(self, statement):
        match = _ASSIGN_RE.match(statement)
        if not match:
            self.error(f"cannot parse statement '{statement}'")
        name, rhs = match.group(1), match.group(2).strip()
        product = _MATMUL_RE.match(rhs)
        if product and product.group(1) in self.names:
            left = self.names[product.group(1)]
            if left.kind is VarKind.A:
                vector = self.resolve(product.group(2), (VarKind.G, VarKind.H), "a vector")
                self.define(MatMul(name, left, vector))
                return
        call = _CALL_RE.match(rhs)
        if call:
            self.call(name, *call.groups())
            return
        self.lincomb(name, rhs)

    def call(self, name, fn_name, params_text, args_text):
        params = []
        if params_text is not None and params_text.strip():
            params = [self.number(p.strip()) for p in params_text.split(",")]
        args = [a.strip() for a in args_text.split(",")] if args_text.strip() else []
        variables = [self.resolve(a, (VarKind.G, VarKind.H), "a vector") for a in args]
        fn = NonlinRef(fn_name, params)
        message = nonlinearities.check_reference(fn, len(variables))
        if message:
            self.error(message, fn_name)
        if all(v.kind is VarKind.G for v in variables):
            self.define(Nonlin(name, fn, variables))
        else:
            self.require_extended(fn_name)
            self.define(Comp(name, fn, variables))

    def lincomb(self, name, rhs):
        terms = []
        position = 0
        while position < len(rhs):
            match = _TERM_RE.match(rhs, position)
            if not match or (terms and match.group(1) is None):
                self.error(f"cannot parse expression '{rhs[position:].strip()}'", rhs[position:].strip())
            sign = -1.0 if match.group(1) == "-" else 1.0
            coefficient = self.number(match.group(2)) if match.group(2) else 1.0
            var = self.resolve(match.group(3), (VarKind.G, VarKind.H), "a vector")
            terms.append((sign * coefficient, var))
            position = match.end()
        if not terms:
            self.error("empty right-hand side")
        if all(v.kind is VarKind.G for _, v in terms):
            self.define(LinComb(name, terms))
            return
        self.require_extended(name)
        fn = NonlinRef("lincomb", [c for c, _ in terms])
        self.define(Comp(name, fn, [v for _, v in terms]))

    def require_extended(self, token):
        if self.syntax_mode != EXTENDED:
            self.error("Comp line requires 'syntax extended'", token)


def parse_program(text: str) -> Skeleton:
    return _Parser(text).parse()


def load_program(path) -> Skeleton:
    with open(path, encoding="utf-8") as source:
        return parse_program(source.read())


def _number(value: float) -> str:
    return format(float(value), ".17g")


def _render_line(sk: Skeleton, line: Line) -> str:
    if isinstance(line, VecIn):
        return f"input vec {line.name}" + (f" : {line.cdc_hint}" if line.cdc_hint else "")
    if isinstance(line, MatIn):
        hints = f" : {line.rows_hint} x {line.cols_hint}" if line.rows_hint else ""
        return f"input mat {line.name}{hints}"
    if isinstance(line, Transpose):
        return f"trans {line.name} = {sk.name_of(line.source)}"
    if isinstance(line, MatMul):
        return f"{line.name} = {sk.name_of(line.matrix)} * {sk.name_of(line.vector)}"
    if isinstance(line, LinComb):
        terms = " + ".join(f"{_number(c)}*{sk.name_of(v)}" for c, v in line.terms)
        return f"{line.name} = {terms}"
    args = ", ".join(sk.name_of(v) for v in line.args)
    return f"{line.name} = {line.fn}({args})"


def render_program(sk: Skeleton, comments: Optional[Mapping[int, str]] = None) -> str:
    """
    Canonical DSL text. ``parse_program(render_program(sk)) == sk`` for every
    parsed program.
    """
    comments = comments or {}
    out = [f"syntax {sk.syntax_mode}"]
    for i, line in enumerate(sk.lines, 1):
        if sk.backward_start == i:
            out.append("backward")
        text = _render_line(sk, line)
        if i in comments:
            text += f"  # {comments[i]}"
        out.append(text)
    for a, b in sk.constraints:
        out.append(f"constrain dim({sk.name_of(a)}) = dim({sk.name_of(b)})")
    for v, value in sk.annotations.sigma:
        out.append(f"sigma {sk.name_of(v)} = {_number(value)}")
    for v, value in sk.annotations.mean:
        out.append(f"mean {sk.name_of(v)} = {_number(value)}")
    for a, b, value in sk.annotations.cov:
        out.append(f"cov {sk.name_of(a)} {sk.name_of(b)} = {_number(value)}")
    for a, b, value in sk.annotations.ratio:
        out.append(f"ratio {a} / {b} = {_number(value)}")
    for name, text in sk.measures:
        out.append(f"measure {name} = {text}")
    return "\n".join(out) + "\n"


# expression language used by measures and --phi


_UNSIGNED = r"\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?"
_TOKEN_RE = re.compile(r"\s*(?:(" + _UNSIGNED + r")|(" + _NAME + r")|(\*\*|[-+*/()\[\],]))")


class _ExpressionParser:
    def __init__(self, sk: Skeleton, text: str):
        self.sk = sk
        self.text = text
        self.tokens = []
        position = 0
        while position < len(text):
            if text[position:].strip() == "":
                break
            match = _TOKEN_RE.match(text, position)
            if not match:
                raise ParseError(f"unexpected character '{text[position:].strip()[0]}'", None, position + 1)
            number, name, op = match.groups()
            start = match.start(match.lastindex)
            if number is not None:
                self.tokens.append(("num", number, start))
            elif name is not None:
                self.tokens.append(("name", name, start))
            else:
                self.tokens.append(("op", op, start))
            position = match.end()
        self.index = 0

    def peek(self):
        return self.tokens[self.index] if self.index < len(self.tokens) else ("end", "", len(self.text))

    def take(self, value=None):
        token = self.peek()
        if value is not None and token[1] != value:
            self.fail(f"expected '{value}'")
        self.index += 1
        return token

    def fail(self, message):
        raise ParseError(message, None, self.peek()[2] + 1)

    def parse(self) -> ExprDag:
        if not self.tokens:
            raise ParseError("empty expression")
        result = self.sum()
        if self.peek()[0] != "end":
            self.fail(f"unexpected '{self.peek()[1]}'")
        return result

    def sum(self):
        result = self.product()
        while self.peek()[1] in ("+", "-"):
            sign = 1.0 if self.take()[1] == "+" else -1.0
            result = _combine(result, self.product(), sign)
        return result

    def product(self):
        result = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            right = self.unary()
            if op == "*":
                result = simplified_apply(NonlinRef("mul"), [result, right])
            elif not right.is_const or right.value == 0.0:
                self.fail("division is only supported by non-zero constants")
            else:
                result = _scale(1.0 / right.value, result)
        return result

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return _scale(-1.0, self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] != "**":
            return base
        self.take()
        kind, token, _ = self.take()
        if kind != "num" or float(token) != int(float(token)):
            self.fail("exponent must be a non-negative integer")
        exponent = int(float(token))
        if exponent == 0:
            return ExprDag.const(1.0)
        return simplified_apply(NonlinRef("mul"), [base] * exponent)

    def atom(self):
        kind, token, _ = self.peek()
        if kind == "num":
            self.take()
            return ExprDag.const(float(token))
        if token == "(":
            self.take()
            result = self.sum()
            self.take(")")
            return result
        if kind != "name":
            self.fail(f"unexpected '{token}'")
        self.take()
        if self.peek()[1] in ("(", "["):
            return self.call(token)
        try:
            var = self.sk.lookup(token)
        except ProgramError as error:
            self.index -= 1
            self.fail(str(error))
        if var.kind is VarKind.A:
            self.index -= 1
            self.fail(f"'{token}' is a matrix")
        return expand_definition(self.sk, var)

    def call(self, name):
        params = []
        if self.peek()[1] == "[":
            self.take()
            while True:
                sign = 1.0
                if self.peek()[1] == "-":
                    self.take()
                    sign = -1.0
                kind, token, _ = self.take()
                if kind != "num":
                    self.fail("expected a number")
                params.append(sign * float(token))
                if self.peek()[1] != ",":
                    break
                self.take()
            self.take("]")
        self.take("(")
        args = [self.sum()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.sum())
        self.take(")")
        fn = NonlinRef(name, params)
        message = nonlinearities.check_reference(fn, len(args))
        if message:
            self.fail(message)
        return simplified_apply(fn, args)


def _scale(factor: float, expr: ExprDag) -> ExprDag:
    if expr.is_const:
        return ExprDag.const(factor * expr.value)
    return ExprDag.apply(NonlinRef("lincomb", (factor,)), expr)


def _combine(left: ExprDag, right: ExprDag, sign: float) -> ExprDag:
    if left.is_const and right.is_const:
        return ExprDag.const(left.value + sign * right.value)
    return ExprDag.apply(NonlinRef("lincomb", (1.0, sign)), left, right)


def parse_expression(sk: Skeleton, text: str) -> ExprDag:
    """
    Parses an arithmetic expression over the program's G- and H-vars.

    H-vars are replaced by their definitions, so the result only has G-var
    leaves.
    """
    return _ExpressionParser(sk, text).parse()
