"""
Spectral moments of the GOE and of Wishart matrices.

The limits come from the coefficient recursions that detransposing the
power-iteration programs produces. The same programs run through the
simulator give the finite-width estimates.
"""
import logging
import math
from fractions import Fraction
from typing import List, Optional, Tuple

from tensor_programs.errors import ProgramError
from tensor_programs.gaussian import ExpectationMethod
from tensor_programs.limits import SamplingSpec
from tensor_programs.program import CdcPartition, Skeleton, compute_cdc, parse_expression, parse_program
from tensor_programs.report import ReportRow
from tensor_programs.simulator import convergence_study

log = logging.getLogger(__name__)


def catalan(k: int) -> int:
    if k < 0:
        raise ValueError("Catalan numbers are defined for k >= 0")
    return math.comb(2 * k, k) // (k + 1)


def goe_moment(k: int) -> int:
    """
    ``lim (1/n) tr(A^k)`` for a GOE matrix with semicircle support
    ``[-2, 2]``, solved from ``b^j_j = 1`` and
    ``b^j_r = sum_{i=r}^{j-2} b^i_r b^{j-1}_{i+1}`` as ``b^k_0``.
    """
    if k < 0:
        raise ValueError("moments are defined for k >= 0")
    b = [[0] * (k + 1) for _ in range(k + 1)]
    for j in range(k + 1):
        b[j][j] = 1
        for r in range(j - 1, -1, -1):
            b[j][r] = sum(b[i][r] * b[j - 1][i + 1] for i in range(r, j - 1))
    return b[k][0]


def mp_moment(k: int, alpha: float) -> float:
    """
    ``lim (1/m) tr((A A^T)^k)`` for an ``m x n`` matrix with iid
    ``N(0, 1/n)`` entries and ``m / n -> alpha``.

    Integer and rational ``alpha`` give exact results.
    """
    if k < 0:
        raise ValueError("moments are defined for k >= 0")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    one = Fraction(1) if isinstance(alpha, (int, Fraction)) else 1.0
    b = [[0 * one] * (k + 1) for _ in range(k + 1)]
    bar = [[0 * one] * (k + 1) for _ in range(k + 1)]
    b[0][0] = bar[0][0] = one
    for i in range(1, k + 1):
        b[i][i] = bar[i][i] = one
        for j in range(i):
            b[i][j] = sum((bar[i - 1][m] * b[m][j] for m in range(j, i)), 0 * one)
        for j in range(i):
            bar[i][j] = alpha * sum((b[i][m] * bar[m - 1][j] for m in range(j + 1, i + 1)), 0 * one)
    return b[k][0]


def mp_moment_closed_form(k: int, alpha: float) -> float:
    if k == 0:
        return 1
    return sum(
        alpha**j * (1 + alpha) ** (k - 1 - 2 * j) * math.comb(k - 1, 2 * j) * catalan(j)
        for j in range((k - 1) // 2 + 1)
    )


def goe_program(k: int) -> str:
    """
    ``g^j = (A + A^T) g^{j-1}`` with ``A`` of variance ``1 / (2n)``, measuring
    ``<g^0, g^j> / n`` as ``moment{j}``.
    """
    if k < 1:
        raise ProgramError("the power iteration needs at least one step")
    lines = [
        "syntax original",
        "input vec g0 : n",
        "input mat A : n x n",
        "trans AT = A",
    ]
    for j in range(1, k + 1):
        lines.append(f"Ag{j} = A * g{j - 1}")
        lines.append(f"ATg{j} = AT * g{j - 1}")
        lines.append(f"g{j} = Ag{j} + ATg{j}")
    lines.append(f"sigma A = {1 / math.sqrt(2):.17g}")
    lines.append("cov g0 g0 = 1")
    lines.extend(f"measure moment{j} = g0 * g{j}" for j in range(1, k + 1))
    return "\n".join(lines) + "\n"


def wishart_program(k: int, alpha: float) -> str:
    """
    ``g^j = A A^T g^{j-1}`` for ``A : m x n``, ``m / n = alpha``, measuring
    ``<g^0, g^j> / m`` as ``moment{j}``.
    """
    if k < 1:
        raise ProgramError("the power iteration needs at least one step")
    if alpha <= 0:
        raise ProgramError("alpha must be positive")
    lines = [
        "syntax original",
        "input vec g0 : m",
        "input mat A : m x n",
        "trans AT = A",
    ]
    for j in range(1, k + 1):
        lines.append(f"u{j} = AT * g{j - 1}")
        lines.append(f"g{j} = A * u{j}")
    lines.append("sigma A = 1")
    lines.append("cov g0 g0 = 1")
    lines.append(f"ratio m / n = {float(alpha):.17g}")
    lines.extend(f"measure moment{j} = g0 * g{j}" for j in range(1, k + 1))
    return "\n".join(lines) + "\n"


def _compile(text: str) -> Tuple[Skeleton, CdcPartition, SamplingSpec]:
    sk = parse_program(text)
    cdc = compute_cdc(sk)
    return sk, cdc, SamplingSpec.from_skeleton(sk, cdc)


def _study(text, theory, n, trials, seed, coupled, workers, method):
    sk, cdc, spec = _compile(text)
    phis = [(name, parse_expression(sk, expression)) for name, expression in sk.measures]
    report = convergence_study(
        sk,
        cdc,
        spec,
        phis,
        [n],
        trials=trials,
        seed=seed,
        coupled=coupled,
        workers=workers,
        routes=(),
        method=method,
    )
    rows = []
    for row in report.rows:
        j = int(row.quantity[len("moment"):])
        rows.append(ReportRow(row.quantity, row.width, row.empirical, row.stderr, float(theory(j)), "recursion"))
    return rows


def semicircle_study(
    k: int,
    n: int = 4096,
    trials: int = 20,
    seed: int = 0,
    coupled: bool = False,
    workers: int = 1,
    method: Optional[ExpectationMethod] = None,
) -> List[ReportRow]:
    """
    Simulated ``<g^0, A^j g^0> / n`` for ``j = 1 .. k`` next to the GOE
    moments.
    """
    log.info(f"semicircle moments up to {k} at n={n}")
    return _study(goe_program(k), goe_moment, n, trials, seed, coupled, workers, method)


def marchenko_pastur_study(
    k: int,
    alpha: float,
    m: int = 4096,
    trials: int = 20,
    seed: int = 0,
    coupled: bool = False,
    workers: int = 1,
    method: Optional[ExpectationMethod] = None,
) -> List[ReportRow]:
    """
    Simulated ``<g^0, (A A^T)^j g^0> / m`` for ``j = 1 .. k`` next to the
    Marchenko-Pastur moments; ``m`` is the number of rows.
    """
    log.info(f"Marchenko-Pastur moments up to {k} at m={m}, alpha={alpha}")
    return _study(wishart_program(k, alpha), lambda j: mp_moment(j, alpha), m, trials, seed, coupled, workers, method)
