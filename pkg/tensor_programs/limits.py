"""
Limit theory of tensor programs: the mean and covariance recursion for
transpose-free programs and for backpropagation-style extensions, the
extension validity check and limit moments.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from tensor_programs.errors import NumericError, ProgramError
from tensor_programs.gaussian import (
    PINV_RCOND,
    PSD_TOL,
    ExpectationMethod,
    GaussianSpec,
    expect,
    numeric_rank,
)
from tensor_programs.program import (
    CdcPartition,
    ExprDag,
    LinComb,
    Line,
    MatIn,
    MatMul,
    Skeleton,
    Transpose,
    VarId,
    VarKind,
    VecIn,
    compute_cdc,
    execute,
    expand_lines,
)
from tensor_programs.rng import stream

log = logging.getLogger(__name__)

ODDNESS_WIDTH = 8
ODDNESS_DRAWS = 8
RANK_PERTURBATION = 1e-6


@dataclass(frozen=True, eq=False)
class SamplingSpec:
    """
    Sampling data of a program: ``sigma_of`` for input matrices, the joint law
    of the input vectors of every dimension class (in ``input_order``) and the
    declared width ratios ``ratio[(a, b)] = n_a / n_b``.
    """

    sigma_of: Mapping[VarId, float]
    input_mean: Mapping[str, np.ndarray]
    input_cov: Mapping[str, np.ndarray]
    input_order: Mapping[str, Tuple[VarId, ...]]
    ratio: Mapping[Tuple[str, str], float] = field(default_factory=dict)
    widths: Optional[Mapping[str, int]] = None
    provenance: Mapping[VarId, VarId] = field(default_factory=dict)
    psd_tol: float = PSD_TOL

    def __post_init__(self):
        for cls, order in self.input_order.items():
            GaussianSpec(self.input_mean[cls], self.input_cov[cls], order, self.psd_tol)
        object.__setattr__(self, "_potential", _ratio_potentials(self.ratio))
        object.__setattr__(
            self,
            "_input_index",
            {v: (cls, i) for cls, order in self.input_order.items() for i, v in enumerate(order)},
        )

    @classmethod
    def from_skeleton(cls, sk: Skeleton, cdc: CdcPartition, psd_tol: float = PSD_TOL) -> "SamplingSpec":
        """
        Reads the program's annotations. Unannotated matrices get ``sigma = 1``,
        input vectors mean 0, variance 1 and zero covariance with the others.
        ``psd_tol`` is the tolerance of every Gaussian law built from the spec.
        """
        sigma_of = {v: 1.0 for v in sk.variables(VarKind.A) if isinstance(sk.line(v), MatIn)}
        sigma_of.update(dict(sk.annotations.sigma))
        order: Dict[str, List[VarId]] = {}
        for v in sk.variables(VarKind.G):
            if isinstance(sk.line(v), VecIn):
                order.setdefault(cdc.class_of[v], []).append(v)
        means = dict(sk.annotations.mean)
        input_mean = {c: np.array([means.get(v, 0.0) for v in members]) for c, members in order.items()}
        input_cov = {c: np.eye(len(members)) for c, members in order.items()}
        for a, b, value in sk.annotations.cov:
            if cdc.class_of[a] != cdc.class_of[b]:
                raise ProgramError(
                    f"cov between '{sk.name_of(a)}' and '{sk.name_of(b)}' which lie in different dimension classes"
                )
            members = order[cdc.class_of[a]]
            i, j = members.index(a), members.index(b)
            input_cov[cdc.class_of[a]][i, j] = value
            input_cov[cdc.class_of[a]][j, i] = value
        ratio = {}
        for a, b, value in sk.annotations.ratio:
            for c in (a, b):
                if c not in cdc.classes:
                    raise ProgramError(f"ratio refers to unknown dimension class '{c}'")
            ratio[(a, b)] = value
        return cls(
            MappingProxyType(sigma_of),
            MappingProxyType(input_mean),
            MappingProxyType(input_cov),
            MappingProxyType({c: tuple(m) for c, m in order.items()}),
            MappingProxyType(ratio),
            psd_tol=psd_tol,
        )

    def sigma(self, a: VarId) -> float:
        try:
            return self.sigma_of[a]
        except KeyError:
            raise ProgramError(f"no sigma for matrix {a}") from None

    def alpha(self, a: str, b: str) -> float:
        """
        Limit of ``n_a / n_b``. Classes without a declared relation have ratio 1.
        """
        if a == b:
            return 1.0
        potential = self._potential
        if a in potential and b in potential and potential[a][0] == potential[b][0]:
            return math.exp(potential[a][1] - potential[b][1])
        return 1.0

    def mean_of(self, v: VarId) -> float:
        cls, i = self._locate(v)
        return float(self.input_mean[cls][i])

    def cov_of(self, a: VarId, b: VarId) -> float:
        cls_a, i = self._locate(a)
        cls_b, j = self._locate(b)
        if cls_a != cls_b:
            return 0.0
        return float(self.input_cov[cls_a][i, j])

    def _locate(self, v):
        try:
            return self._input_index[v]
        except KeyError:
            raise ProgramError(f"{v} is not an input vector") from None

    def with_widths(self, widths: Mapping[str, int]) -> "SamplingSpec":
        return replace(self, widths=MappingProxyType(dict(widths)))

    def to_dict(self, sk: Skeleton) -> dict:
        return {
            "sigma": {sk.name_of(v): s for v, s in sorted(self.sigma_of.items())},
            "ratio": {f"{a}/{b}": r for (a, b), r in sorted(self.ratio.items())},
            "inputs": {
                c: {
                    "vars": [sk.name_of(v) for v in self.input_order[c]],
                    "mean": self.input_mean[c].tolist(),
                    "cov": self.input_cov[c].tolist(),
                }
                for c in sorted(self.input_order)
            },
        }


def _ratio_potentials(ratio):
    # log-width of every class relative to the first class of its component
    edges: Dict[str, List[Tuple[str, float]]] = {}
    for (a, b), value in ratio.items():
        if value <= 0:
            raise ProgramError(f"ratio {a} / {b} must be positive")
        edges.setdefault(a, []).append((b, -math.log(value)))
        edges.setdefault(b, []).append((a, math.log(value)))
    potential: Dict[str, Tuple[str, float]] = {}
    for root in sorted(edges):
        if root in potential:
            continue
        potential[root] = (root, 0.0)
        stack = [root]
        while stack:
            a = stack.pop()
            for b, step in edges[a]:
                value = potential[a][1] + step
                if b not in potential:
                    potential[b] = (root, value)
                    stack.append(b)
                elif abs(potential[b][1] - value) > 1e-9 * max(1.0, abs(value)):
                    raise ProgramError(f"inconsistent width ratios around classes '{a}' and '{b}'")
    return potential


@dataclass
class RankRecord:
    matrix: str
    ranks: List[int] = field(default_factory=list)
    stable: bool = True
    gram: Optional[np.ndarray] = None


class RankDiagnostics:
    """
    Numeric rank of the Gram matrix of the arguments multiplied by every
    matrix, together with a stability verdict: the rank must not change when
    the relative cutoff ``rcond`` is raised by ``perturbation``.
    """

    def __init__(self, rcond: float = PINV_RCOND, perturbation: float = RANK_PERTURBATION):
        self.rcond = rcond
        self.perturbation = perturbation
        self.records: Dict[str, RankRecord] = {}

    def observe(self, matrix: str, gram: np.ndarray):
        record = self.records.setdefault(matrix, RankRecord(matrix))
        rank = numeric_rank(gram, self.rcond)
        loose = numeric_rank(gram, self.rcond + self.perturbation)
        record.ranks.append(rank)
        record.gram = np.array(gram)
        if loose != rank:
            record.stable = False
            log.warning(f"numeric rank of the Gram matrix of '{matrix}' depends on the cutoff")

    @property
    def stable(self) -> bool:
        return all(record.stable for record in self.records.values())

    def to_dict(self) -> dict:
        return {
            name: {
                "ranks": record.ranks,
                "stable": record.stable,
                "gram": None if record.gram is None else record.gram.tolist(),
            }
            for name, record in sorted(self.records.items())
        }


@dataclass(frozen=True, eq=False)
class LimitTable:
    mu: Mapping[VarId, float]
    blocks: Mapping[str, np.ndarray]
    order: Mapping[str, Tuple[VarId, ...]]
    class_of: Mapping[VarId, str]
    names: Mapping[VarId, str]
    psd_tol: float = PSD_TOL

    def mean(self, v: VarId) -> float:
        return self.mu[v]

    def cov(self, a: VarId, b: VarId) -> float:
        cls = self.class_of[a]
        if self.class_of[b] != cls:
            return 0.0
        order = self.order[cls]
        return float(self.blocks[cls][order.index(a), order.index(b)])

    def law(self, cls: str) -> GaussianSpec:
        order = self.order.get(cls, ())
        return GaussianSpec([self.mu[v] for v in order], self.blocks.get(cls, np.zeros((0, 0))), order, self.psd_tol)

    def class_of_expression(self, phi: ExprDag) -> str:
        classes = {self.class_of[v] for v in phi.leaves}
        if len(classes) > 1:
            raise ProgramError(f"expression mixes dimension classes {', '.join(sorted(classes))}")
        if not classes:
            raise ProgramError("expression has no variables")
        return classes.pop()

    def to_dict(self) -> dict:
        return {
            "mu": {self.names[v]: self.mu[v] for v in sorted(self.mu)},
            "K": {
                cls: {
                    "vars": [self.names[v] for v in self.order[cls]],
                    "matrix": self.blocks[cls].tolist(),
                }
                for cls in sorted(self.order)
                if self.order[cls]
            },
        }


class LimitRecursion:
    """
    Incremental evaluation of the limit means and covariances, one line at a
    time.

    A matrix and its transpose are treated as independent matrices, which is
    exact for transpose-free programs and for valid backpropagation
    extensions. Matrix products by the same matrix covary through the Gram
    matrix of their arguments.
    """

    def __init__(
        self,
        spec: SamplingSpec,
        method: Optional[ExpectationMethod] = None,
        rcond: float = PINV_RCOND,
    ):
        self.spec = spec
        self.method = method or ExpectationMethod()
        self.diagnostics = RankDiagnostics(rcond)
        self.lines: List[Line] = []
        self.class_of: Dict[VarId, str] = {}
        self.sides: Dict[VarId, Tuple[str, str]] = {}
        self.sigma: Dict[VarId, float] = {}
        self.order: Dict[str, List[VarId]] = {}
        self.mu: Dict[VarId, float] = {}
        self._blocks: Dict[str, np.ndarray] = {}
        self._products: Dict[VarId, List[Tuple[VarId, VarId]]] = {}

    def var(self, line_number: int) -> VarId:
        return VarId(line_number, self.lines[line_number - 1].kind)

    def push(
        self,
        line: Line,
        cls: Optional[str] = None,
        sides: Optional[Tuple[str, str]] = None,
        sigma: Optional[float] = None,
        mean: float = 0.0,
        variance: float = 1.0,
        cross: Optional[Mapping[VarId, float]] = None,
    ) -> VarId:
        var = VarId(len(self.lines) + 1, line.kind)
        self.lines.append(line)
        if isinstance(line, MatIn):
            self.sides[var] = sides
            self.sigma[var] = 1.0 if sigma is None else float(sigma)
            return var
        if isinstance(line, Transpose):
            rows, cols = self.sides[line.source]
            self.sides[var] = sides or (cols, rows)
            self.sigma[var] = self.sigma[line.source]
            return var
        if cls is None:
            if isinstance(line, VecIn):
                raise ProgramError(f"input vector '{line.name}' needs a dimension class")
            if isinstance(line, MatMul):
                cls = self.sides[line.matrix][0]
            else:
                cls = self.class_of[line.arguments()[0]]
        self.class_of[var] = cls
        if line.kind is VarKind.H:
            return var
        if isinstance(line, VecIn):
            self._append_input(var, cls, mean, variance, cross or {})
        elif isinstance(line, MatMul):
            self._append_product(var, line, cls)
        else:
            self._append_lincomb(var, line, cls)
        return var

    def law(self, cls: str) -> GaussianSpec:
        order = self.order.get(cls, [])
        return GaussianSpec(
            [self.mu[v] for v in order],
            self._blocks.get(cls, np.zeros((0, 0))),
            tuple(order),
            self.spec.psd_tol,
        )

    def _append(self, var, cls, mu, row, variance):
        order = self.order.setdefault(cls, [])
        old = self._blocks.get(cls, np.zeros((0, 0)))
        k = len(order)
        block = np.zeros((k + 1, k + 1))
        block[:k, :k] = old
        block[k, :k] = row
        block[:k, k] = row
        block[k, k] = variance
        self._blocks[cls] = block
        order.append(var)
        self.mu[var] = float(mu)

    def _linear_row(self, cls, terms):
        order = self.order.get(cls, [])
        row = np.zeros(len(order))
        block = self._blocks.get(cls)
        for coefficient, v in terms:
            row += coefficient * block[order.index(v), :]
        return row

    def _append_input(self, var, cls, mean, variance, cross):
        order = self.order.get(cls, [])
        row = np.zeros(len(order))
        for i, p in enumerate(order):
            line = self.lines[p.line_number - 1]
            if isinstance(line, VecIn):
                row[i] = cross.get(p, 0.0)
            elif isinstance(line, LinComb):
                row[i] = sum(c * row[order.index(t)] for c, t in line.terms)
        self._append(var, cls, mean, row, variance)

    def _append_lincomb(self, var, line, cls):
        row = self._linear_row(cls, line.terms)
        order = self.order.get(cls, [])
        variance = sum(c * row[order.index(t)] for c, t in line.terms)
        mu = sum(c * self.mu[t] for c, t in line.terms)
        self._append(var, cls, mu, row, variance)

    def _append_product(self, var, line, cls):
        matrix = line.matrix
        matrix_line = self.lines[matrix.line_number - 1]
        alpha = 1.0
        if isinstance(matrix_line, Transpose):
            rows, cols = self.sides[matrix_line.source]
            alpha = self.spec.alpha(rows, cols)
        scale = self.sigma[matrix] ** 2 * alpha
        previous = self._products.setdefault(matrix, [])
        argument_class = self.class_of[line.vector]
        arguments = [h for _, h in previous] + [line.vector]
        dags = [expand_lines(self.lines, h) for h in arguments]
        method = self.method.keyed(var.line_number)
        gram = expect(dags, self.law(argument_class), method).gram
        self.diagnostics.observe(matrix_line.name, gram)
        order = self.order.get(cls, [])
        row = np.zeros(len(order))
        for j, (g, _) in enumerate(previous):
            row[order.index(g)] = scale * gram[-1, j]
        for i, p in enumerate(order):
            p_line = self.lines[p.line_number - 1]
            if isinstance(p_line, LinComb):
                row[i] = sum(c * row[order.index(t)] for c, t in p_line.terms)
        previous.append((var, line.vector))
        self._append(var, cls, 0.0, row, scale * gram[-1, -1])

    def table(self) -> LimitTable:
        return LimitTable(
            MappingProxyType(dict(self.mu)),
            MappingProxyType(dict(self._blocks)),
            MappingProxyType({c: tuple(o) for c, o in self.order.items()}),
            MappingProxyType(dict(self.class_of)),
            MappingProxyType({VarId(i, line.kind): line.name for i, line in enumerate(self.lines, 1)}),
            self.spec.psd_tol,
        )


def _replay(engine: LimitRecursion, sk: Skeleton, cdc: CdcPartition, spec: SamplingSpec, new_from=None):
    for i, line in enumerate(sk.lines, 1):
        var = sk.var(i)
        if isinstance(line, VecIn):
            cls = cdc.class_of[var]
            earlier = [p for p in spec.input_order[cls] if p.line_number < i]
            if new_from is not None and i >= new_from:
                earlier = [p for p in earlier if p.line_number >= new_from]
            engine.push(
                line,
                cls,
                mean=spec.mean_of(var),
                variance=spec.cov_of(var, var),
                cross={p: spec.cov_of(var, p) for p in earlier},
            )
        elif isinstance(line, MatIn):
            engine.push(line, sides=cdc.matrix_sides[var], sigma=spec.sigma(var))
        elif isinstance(line, Transpose):
            engine.push(line, sides=cdc.matrix_sides[var])
        else:
            engine.push(line, cdc.class_of[var])


def compute_limits_no_transpose(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    method: Optional[ExpectationMethod] = None,
    rcond: float = PINV_RCOND,
) -> Tuple[LimitTable, RankDiagnostics]:
    """
    Limit means and covariances of every G-var of a transpose-free program.
    """
    if sk.has_transpose:
        raise ProgramError("program contains a transpose")
    engine = LimitRecursion(spec, method, rcond)
    _replay(engine, sk, cdc, spec)
    log.debug(f"limits computed for {len(sk)} lines")
    return engine.table(), engine.diagnostics


def compute_limits_backprop(
    fwd: Skeleton,
    ext: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    method: Optional[ExpectationMethod] = None,
    rcond: float = PINV_RCOND,
    strict: bool = True,
) -> Tuple[LimitTable, RankDiagnostics]:
    """
    Limits of an extension of a transpose-free program by backpropagation
    lines, treating every transposed matrix as independent of its source.

    With ``strict`` the extension must pass ``check_extension``; without it
    the result is the gradient-independence computation whatever the
    program.
    """
    if ext.lines[: len(fwd)] != fwd.lines:
        raise ProgramError("extension does not start with the forward program")
    if strict:
        problems = check_extension(fwd, ext, spec, cdc)
        if problems:
            raise ProgramError(f"extension validity failure: {'; '.join(problems)}")
    engine = LimitRecursion(spec, method, rcond)
    _replay(engine, ext, cdc, spec, new_from=len(fwd) + 1)
    return engine.table(), engine.diagnostics


def _infer_backward_start(sk: Skeleton) -> Optional[int]:
    transposes = [i for i, line in enumerate(sk.lines, 1) if isinstance(line, Transpose)]
    if not transposes:
        return None
    last_forward = 0
    for i, line in enumerate(sk.lines[: transposes[0] - 1], 1):
        if isinstance(line, MatMul) and isinstance(sk.line(line.matrix), MatIn):
            last_forward = i
    for i, line in enumerate(sk.lines, 1):
        if i > last_forward and isinstance(line, VecIn):
            return i
    return None


def split_extension(sk: Skeleton) -> Tuple[Skeleton, Skeleton]:
    """
    Splits a program at its ``backward`` marker, or at the first new input
    vector after the forward pass when there is no marker.
    """
    start = sk.backward_start or _infer_backward_start(sk)
    if start is None or not 2 <= start <= len(sk):
        raise ProgramError("cannot split program into a forward and a backward part")
    return sk.prefix(start - 1), replace(sk, backward_start=start)


def check_extension(
    fwd: Skeleton,
    ext: Skeleton,
    spec: SamplingSpec,
    cdc: Optional[CdcPartition] = None,
) -> List[str]:
    """
    Diagnostics explaining why ``ext`` is not a valid backpropagation
    extension of ``fwd``, empty when it is.
    """
    count = len(fwd)
    if ext.lines[:count] != fwd.lines:
        return ["extension does not start with the forward program"]
    problems = []
    if fwd.has_transpose:
        problems.append("forward program must not contain transposes")
    new_inputs = []
    for i in range(count + 1, len(ext) + 1):
        line = ext.lines[i - 1]
        where = f"line {i} ('{line.name}')"
        if isinstance(line, MatIn):
            problems.append(f"{where}: new lines may not introduce input matrices")
        elif isinstance(line, MatMul):
            if not isinstance(ext.line(line.matrix), Transpose):
                problems.append(f"{where}: new matrix products must use transposed matrices")
            elif line.vector.line_number <= count:
                problems.append(f"{where}: transposed matrix applied to a forward variable")
        elif isinstance(line, VecIn):
            new_inputs.append(ext.var(i))
    if not new_inputs:
        problems.append("extension has no new input vector")
        return problems
    for v in new_inputs:
        name = ext.name_of(v)
        if abs(spec.mean_of(v)) > 1e-12:
            problems.append(f"new input '{name}' must have zero mean")
        for p in ext.variables(VarKind.G):
            if p.line_number <= count and isinstance(ext.line(p), VecIn):
                if abs(spec.cov_of(v, p)) > 1e-12:
                    problems.append(f"new input '{name}' must be independent of '{ext.name_of(p)}'")
    if problems:
        return problems
    problems.extend(_oddness_problems(ext, count, new_inputs, cdc or compute_cdc(ext)))
    return problems


def _oddness_problems(ext, count, new_inputs, cdc):
    # every new variable must flip sign when the new inputs do
    rng = stream(0, 7)
    failing = set()
    for _ in range(ODDNESS_DRAWS):
        inputs = {}
        for i, line in enumerate(ext.lines, 1):
            var = ext.var(i)
            if isinstance(line, VecIn):
                inputs[var] = rng.standard_normal(ODDNESS_WIDTH)
            elif isinstance(line, MatIn):
                inputs[var] = rng.standard_normal((ODDNESS_WIDTH, ODDNESS_WIDTH)) / math.sqrt(ODDNESS_WIDTH)
        flipped = dict(inputs)
        for v in new_inputs:
            flipped[v] = -inputs[v]
        with np.errstate(all="ignore"):
            plain = execute(ext, inputs)
            mirrored = execute(ext, flipped)
        for i in range(count + 1, len(ext) + 1):
            var = ext.var(i)
            if var.kind is VarKind.A:
                continue
            scale = max(1.0, float(np.max(np.abs(plain[var]))))
            if not np.allclose(mirrored[var], -plain[var], rtol=1e-9, atol=1e-9 * scale):
                failing.add(var)
    return [f"'{ext.name_of(v)}' is not odd in the new input vectors" for v in sorted(failing)]


def limit_moment(
    table: LimitTable,
    cls: Optional[str],
    phi: ExprDag,
    method: Optional[ExpectationMethod] = None,
) -> float:
    """
    ``E phi(Z)`` with ``Z`` the limit Gaussian vector of class ``cls``.
    """
    if cls is None:
        cls = table.class_of_expression(phi)
    members = set(table.order.get(cls, ()))
    outside = [v for v in phi.leaves if v not in members]
    if outside:
        names = ", ".join(table.names[v] for v in outside)
        raise ProgramError(f"{names} outside dimension class '{cls}'")
    try:
        return float(expect([phi], table.law(cls), method).mean[0])
    except NumericError:
        log.error(f"cannot integrate {phi!r} over class '{cls}'")
        raise


def class_widths(
    cdc: CdcPartition,
    spec: SamplingSpec,
    n: int,
    reference: str,
    cap: Optional[int] = None,
) -> Dict[str, int]:
    """
    Integer widths ``round(n * alpha(c, reference))`` for every class.
    """
    widths = {}
    for cls in cdc.class_ids:
        width = max(1, int(round(n * spec.alpha(cls, reference))))
        if cap is not None and width > cap:
            raise ProgramError(f"width {width} of class '{cls}' exceeds the cap of {cap}")
        widths[cls] = width
    return widths
