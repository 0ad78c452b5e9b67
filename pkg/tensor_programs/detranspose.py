"""
Detransposition: rewrites a program that uses transposes into a
transpose-free program, in extended syntax, whose limits agree with the
original one.

Every transpose becomes a fresh independent matrix and every matrix product
``g = A h`` becomes ``g_g = A' h`` followed by a correction
``g = g_g + sum_j a_j h_j`` over the arguments ``h_j`` of earlier products by
the transpose of ``A``.
"""
import logging
import math
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from tensor_programs.errors import ProgramError
from tensor_programs.gaussian import PINV_RCOND, ExpectationMethod, expect, stein_derivative
from tensor_programs.limits import LimitRecursion, LimitTable, RankDiagnostics, SamplingSpec, limit_moment
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import (
    EXTENDED,
    Annotations,
    CdcPartition,
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
    expand_lines,
)

log = logging.getLogger(__name__)

RULES = ("pinv", "derivative")


@dataclass(frozen=True, eq=False)
class CoeffRecord:
    matrix: str
    hvars: Tuple[str, ...]
    gvars: Tuple[str, ...]
    gram: np.ndarray
    cross: np.ndarray
    coefficients: np.ndarray
    alpha: float
    rule: str

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix,
            "hvars": list(self.hvars),
            "gvars": list(self.gvars),
            "C": self.gram.tolist(),
            "v": self.cross.tolist(),
            "a": self.coefficients.tolist(),
            "alpha": self.alpha,
            "rule": self.rule,
        }


@dataclass(frozen=True, eq=False)
class DetransposeResult:
    check_sk: Skeleton
    phi: Mapping[VarId, VarId]
    phi_g: Mapping[VarId, VarId]
    coeffs: Mapping[VarId, CoeffRecord]
    check_spec: SamplingSpec
    check_cdc: CdcPartition
    table: LimitTable
    diagnostics: RankDiagnostics
    comments: Mapping[int, str]

    def coefficients(self, sk: Skeleton) -> dict:
        return {sk.name_of(g): record.to_dict() for g, record in sorted(self.coeffs.items())}


def _solve(gram, cross, rcond):
    # restrict to a maximal set of linearly independent arguments
    k = len(cross)
    result = np.zeros(k)
    scale = float(np.max(np.abs(np.diag(gram)), initial=0.0))
    chosen: List[int] = []
    for i in range(k):
        candidate = chosen + [i]
        if scale > 0 and np.linalg.eigvalsh(gram[np.ix_(candidate, candidate)])[0] > rcond * scale:
            chosen = candidate
    if chosen:
        result[chosen] = np.linalg.solve(gram[np.ix_(chosen, chosen)], cross[chosen])
    residual = float(np.max(np.abs(gram @ result - cross), initial=0.0))
    if residual > 1e-6 * max(1.0, float(np.max(np.abs(cross), initial=0.0))):
        log.warning(f"correction coefficients leave a residual of {residual:.3g}")
    if len(chosen) < k:
        log.debug(f"Gram matrix of rank {len(chosen)} < {k}, solved on a maximal-rank subset")
    return result


class _Detransposer:
    def __init__(self, sk, cdc, spec, method, rule, rcond):
        if rule not in RULES:
            raise ValueError(f"unknown detransposition rule '{rule}'")
        self.sk = sk
        self.cdc = cdc
        self.spec = spec
        self.method = method or ExpectationMethod()
        self.rule = rule
        self.rcond = rcond
        self.engine = LimitRecursion(spec, self.method, rcond)
        self.phi: Dict[VarId, VarId] = {}
        self.phi_g: Dict[VarId, VarId] = {}
        self.coeffs: Dict[VarId, CoeffRecord] = {}
        self.comments: Dict[int, str] = {}
        self.sigma: Dict[VarId, float] = {}
        self.provenance: Dict[VarId, VarId] = {}
        self.transposed: Dict[VarId, VarId] = {}
        self.taken = {line.name for line in sk.lines}

    def fresh(self, name):
        candidate = f"{name}_g"
        while candidate in self.taken:
            candidate += "_"
        self.taken.add(candidate)
        return candidate

    def emit(self, line, note, **kwargs) -> VarId:
        var = self.engine.push(line, **kwargs)
        self.comments[var.line_number] = note
        return var

    def run(self) -> DetransposeResult:
        for i, line in enumerate(self.sk.lines, 1):
            var = self.sk.var(i)
            if isinstance(line, VecIn):
                self.input_vector(var, line)
            elif isinstance(line, MatIn):
                rows, cols = self.cdc.matrix_sides[var]
                check = self.emit(
                    MatIn(line.name, rows, cols),
                    f"phi({line.name})",
                    sides=(rows, cols),
                    sigma=self.spec.sigma(var),
                )
                self.sigma[check] = self.spec.sigma(var)
                self.phi[var] = check
            elif isinstance(line, Transpose):
                self.transpose(var, line)
            elif isinstance(line, MatMul):
                self.product(var, line)
            else:
                self.coordinatewise(var, line)
        return self.result()

    def input_vector(self, var, line):
        cls = self.cdc.class_of[var]
        earlier = [p for p in self.spec.input_order[cls] if p.line_number < var.line_number]
        self.phi[var] = self.emit(
            VecIn(line.name, cls),
            f"phi({line.name})",
            cls=cls,
            mean=self.spec.mean_of(var),
            variance=self.spec.cov_of(var, var),
            cross={self.phi[p]: self.spec.cov_of(var, p) for p in earlier},
        )

    def transpose(self, var, line):
        source = line.source
        if source in self.transposed:
            first = self.sk.name_of(self.transposed[source])
            raise ProgramError(f"'{line.name}' transposes '{self.sk.name_of(source)}' again after '{first}'")
        self.transposed[source] = var
        rows, cols = self.cdc.matrix_sides[var]
        source_rows, source_cols = self.cdc.matrix_sides[source]
        sigma = math.sqrt(self.spec.alpha(source_rows, source_cols)) * self.spec.sigma(source)
        check = self.emit(
            MatIn(line.name, rows, cols),
            f"phi({line.name}), fresh copy of {self.sk.name_of(source)}^T",
            sides=(rows, cols),
            sigma=sigma,
        )
        self.sigma[check] = sigma
        self.provenance[check] = self.phi[source]
        self.phi[var] = check

    def coordinatewise(self, var, line):
        cls = self.cdc.class_of[var]
        if isinstance(line, LinComb):
            terms = [(c, self.phi[t]) for c, t in line.terms]
            new = _linear(line.name, terms)
        else:
            args = tuple(self.phi[a] for a in line.args)
            if all(a.kind is VarKind.G for a in args):
                new = Nonlin(line.name, line.fn, args)
            else:
                new = Comp(line.name, line.fn, args)
        self.phi[var] = self.emit(new, f"phi({line.name})", cls=cls)

    def partners(self, var, matrix):
        matrix_line = self.sk.line(matrix)
        if isinstance(matrix_line, Transpose):
            targets = {matrix_line.source}
        else:
            targets = {
                self.sk.var(i)
                for i, line in enumerate(self.sk.lines[: var.line_number - 1], 1)
                if isinstance(line, Transpose) and line.source == matrix
            }
        return [
            (self.sk.var(i), line)
            for i, line in enumerate(self.sk.lines[: var.line_number - 1], 1)
            if isinstance(line, MatMul) and line.matrix in targets
        ]

    def product(self, var, line):
        cls = self.cdc.class_of[var]
        rows, cols = self.cdc.matrix_sides[line.matrix]
        check_g = self.emit(
            MatMul(self.fresh(line.name), self.phi[line.matrix], self.phi[line.vector]),
            f"phi_G({line.name})",
            cls=cls,
        )
        self.phi_g[var] = check_g
        previous = self.partners(var, line.matrix)
        terms = [(1.0, check_g)]
        if previous:
            coefficients = self.coefficients(var, line, previous, rows, cols)
            terms += [(a, self.phi[p.vector]) for a, (_, p) in zip(coefficients, previous) if a != 0.0]
        self.phi[var] = self.emit(_linear(line.name, terms), f"phi({line.name})", cls=cls)

    def coefficients(self, var, line, previous, rows, cols):
        lines = self.engine.lines
        method = self.method.keyed(len(lines))
        h_dags = [expand_lines(lines, self.phi[p.vector]) for _, p in previous]
        g_leaves = [self.phi_g[g] for g, _ in previous]
        target = expand_lines(lines, self.phi[line.vector])
        gram = expect(h_dags, self.engine.law(rows), method).gram
        cross = expect([ExprDag.leaf(g) for g in g_leaves] + [target], self.engine.law(cols), method)
        cross = cross.gram[-1, :-1]
        alpha = self.spec.alpha(cols, rows)
        if self.rule == "pinv":
            coefficients = alpha * _solve(gram, cross, self.rcond)
        else:
            expanded = expand_lines(lines, self.phi[line.vector], through_lincomb=True)
            law = self.engine.law(cols)
            coefficients = np.array(
                [
                    alpha
                    * self.sigma[self.phi[p.matrix]] ** 2
                    * stein_derivative(expanded, law, leaf, method)
                    for leaf, (_, p) in zip(g_leaves, previous)
                ]
            )
        self.coeffs[var] = CoeffRecord(
            self.sk.name_of(line.matrix),
            tuple(self.engine.lines[self.phi[p.vector].line_number - 1].name for _, p in previous),
            tuple(self.engine.lines[g.line_number - 1].name for g in g_leaves),
            gram,
            cross,
            coefficients,
            alpha,
            self.rule,
        )
        return coefficients

    def result(self) -> DetransposeResult:
        lines = self.engine.lines
        mean, cov = [], []
        for cls, order in self.spec.input_order.items():
            for i, v in enumerate(order):
                if self.spec.mean_of(v) != 0.0:
                    mean.append((self.phi[v], self.spec.mean_of(v)))
                for w in order[: i + 1]:
                    value = self.spec.cov_of(v, w)
                    if value != (1.0 if v == w else 0.0):
                        cov.append((self.phi[w], self.phi[v], value))
        annotations = Annotations(
            sigma=sorted(self.sigma.items()),
            mean=sorted(mean),
            cov=sorted(cov),
            ratio=[(a, b, r) for (a, b), r in sorted(self.spec.ratio.items())],
        )
        check_sk = Skeleton(lines, EXTENDED, (), annotations, None, self.sk.measures)
        check_cdc = compute_cdc(check_sk)
        check_spec = SamplingSpec.from_skeleton(check_sk, check_cdc, self.spec.psd_tol)
        check_spec = replace(
            check_spec,
            widths=self.spec.widths,
            provenance=MappingProxyType(dict(self.provenance)),
        )
        return DetransposeResult(
            check_sk,
            MappingProxyType(dict(self.phi)),
            MappingProxyType(dict(self.phi_g)),
            MappingProxyType(dict(self.coeffs)),
            check_spec,
            check_cdc,
            self.engine.table(),
            self.engine.diagnostics,
            MappingProxyType(dict(self.comments)),
        )


def _linear(name, terms):
    if all(v.kind is VarKind.G for _, v in terms):
        return LinComb(name, terms)
    return Comp(name, NonlinRef("lincomb", [c for c, _ in terms]), [v for _, v in terms])


def detranspose(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    method: Optional[ExpectationMethod] = None,
    rule: str = "pinv",
    rcond: float = PINV_RCOND,
) -> DetransposeResult:
    """
    Builds the transpose-free check program of ``sk`` together with the map
    from original variables to their check images and the limits of the check
    program.

    ``rule`` picks how the correction coefficients are computed: ``pinv``
    inverts the Gram matrix of the earlier arguments, ``derivative`` takes
    expected derivatives instead.
    """
    result = _Detransposer(sk, cdc, spec, method, rule, rcond).run()
    log.debug(f"detransposed {len(sk)} lines into {len(result.check_sk)} with {len(result.coeffs)} corrections")
    return result


def detranspose_derivative(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    method: Optional[ExpectationMethod] = None,
    rcond: float = PINV_RCOND,
) -> DetransposeResult:
    return detranspose(sk, cdc, spec, method, "derivative", rcond)


def general_limit_moment(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    cls: Optional[str],
    phi: ExprDag,
    method: Optional[ExpectationMethod] = None,
    rule: str = "pinv",
    result: Optional[DetransposeResult] = None,
    rcond: float = PINV_RCOND,
) -> float:
    """
    Limit of ``(1/n) sum_a phi(g_a)`` for any program, computed on its check
    program.
    """
    if result is None:
        result = detranspose(sk, cdc, spec, method, rule, rcond)
    lines = result.check_sk.lines
    mapping = {v: expand_lines(lines, result.phi[v]) for v in phi.leaves}
    return limit_moment(result.table, cls, phi.substitute(mapping), method)
