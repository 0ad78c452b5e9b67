"""
Finite-width realizations of tensor programs and convergence studies
comparing their coordinate averages with the limit theory.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tensor_programs.detranspose import general_limit_moment
from tensor_programs.errors import ProgramError
from tensor_programs.gaussian import PINV_RCOND, ExpectationMethod, GaussianSpec
from tensor_programs.limits import (
    SamplingSpec,
    check_extension,
    class_widths,
    compute_limits_backprop,
    compute_limits_no_transpose,
    limit_moment,
    split_extension,
)
from tensor_programs.program import CdcPartition, ExprDag, MatIn, Skeleton, VarId, VecIn, execute
from tensor_programs.report import ReportRow
from tensor_programs.rng import SeededStreams

log = logging.getLogger(__name__)

ROUTES = ("auto", "notranspose", "backprop", "naive", "detranspose")

# stream key prefixes
_VECTORS = 0
_MATRICES = 1


@dataclass(frozen=True, eq=False)
class Realization:
    widths: Mapping[str, int]
    values: Mapping[VarId, np.ndarray]
    seed: int
    key: Tuple[int, ...]
    class_of: Mapping[VarId, str]


def _require_widths(cdc, widths, sk):
    needed = set()
    for i, line in enumerate(sk.lines, 1):
        var = sk.var(i)
        if var in cdc.matrix_sides:
            needed.update(cdc.matrix_sides[var])
        else:
            needed.add(cdc.class_of[var])
    missing = sorted(c for c in needed if c not in widths)
    if missing:
        raise ProgramError(f"no width for dimension class {', '.join(repr(c) for c in missing)}")
    for cls in needed:
        if int(widths[cls]) < 1:
            raise ProgramError(f"width of dimension class '{cls}' must be positive")


def _standard_normal(streams, key, shape, coupled):
    # coupled draws fill every row from its own stream, so the array for a
    # smaller shape is the upper-left block of the array for a larger one
    if not coupled:
        return streams.generator(*key).standard_normal(shape)
    rows, cols = shape
    out = np.empty(shape)
    for i, generator in enumerate(streams.generators(rows, *key)):
        out[i] = generator.standard_normal(cols)
    return out


def realize(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    widths: Optional[Mapping[str, int]] = None,
    seed: int = 0,
    key: Sequence[int] = (),
    coupled: bool = False,
) -> Realization:
    """
    Draws the input matrices and vectors of ``sk`` at the given class widths
    and runs the program.

    Matrix entries are ``N(0, sigma^2 / n_cols)``; the input vectors of a class
    are iid over coordinates with the class's input mean and covariance.
    """
    widths = dict(widths if widths is not None else (spec.widths or {}))
    _require_widths(cdc, widths, sk)
    streams = SeededStreams(seed, tuple(key))
    class_index = {cls: i for i, cls in enumerate(cdc.class_ids)}
    inputs: Dict[VarId, np.ndarray] = {}
    for cls, order in spec.input_order.items():
        n = int(widths[cls])
        law = GaussianSpec(spec.input_mean[cls], spec.input_cov[cls], order, spec.psd_tol)
        mean, factor = law.factor()
        noise = _standard_normal(streams, (_VECTORS, class_index[cls]), (n, len(order)), coupled)
        draws = mean + noise[:, : factor.shape[1]] @ factor.T
        for j, v in enumerate(order):
            inputs[v] = np.ascontiguousarray(draws[:, j])
    for i, line in enumerate(sk.lines, 1):
        if isinstance(line, MatIn):
            var = sk.var(i)
            rows, cols = (int(widths[c]) for c in cdc.matrix_sides[var])
            noise = _standard_normal(streams, (_MATRICES, i), (rows, cols), coupled)
            inputs[var] = noise * (spec.sigma(var) / math.sqrt(cols))
    for i, line in enumerate(sk.lines, 1):
        if isinstance(line, VecIn) and sk.var(i) not in inputs:
            raise ProgramError(f"no sampling law for input '{line.name}'")
    values = execute(sk, inputs)
    return Realization(
        MappingProxyType(widths),
        MappingProxyType(values),
        int(seed),
        tuple(key),
        cdc.class_of,
    )


def empirical_moment(r: Realization, cls: Optional[str], phi: ExprDag) -> float:
    """
    ``(1/n) sum_a phi(g_a)`` over the coordinates of a dimension class.
    """
    leaves = phi.leaves
    classes = {r.class_of[v] for v in leaves}
    if cls is None:
        if len(classes) > 1:
            raise ProgramError(f"expression mixes dimension classes {', '.join(sorted(classes))}")
        cls = classes.pop() if classes else None
    elif classes - {cls}:
        raise ProgramError(f"expression has variables outside dimension class '{cls}'")
    value = np.asarray(phi.evaluate({v: r.values[v] for v in leaves}), dtype=float)
    return float(np.mean(value))


def _pick_route(sk, cdc, spec):
    if not sk.has_transpose:
        return "notranspose"
    try:
        fwd, ext = split_extension(sk)
    except ProgramError:
        return "detranspose"
    if check_extension(fwd, ext, spec, cdc):
        return "detranspose"
    return "backprop"


def theory_value(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    phi: ExprDag,
    cls: Optional[str] = None,
    method: Optional[ExpectationMethod] = None,
    route: str = "auto",
    rcond: float = PINV_RCOND,
) -> Tuple[float, str]:
    """
    Limit of ``(1/n) sum_a phi(g_a)`` and the route used to compute it.

    ``auto`` picks the plain recursion for transpose-free programs, the
    backpropagation recursion for valid extensions and detransposition for
    everything else. ``naive`` forces the backpropagation recursion without
    checking the extension.
    """
    if route not in ROUTES:
        raise ValueError(f"unknown theory route '{route}'")
    if route == "auto":
        route = _pick_route(sk, cdc, spec)
    if route == "notranspose":
        table, _ = compute_limits_no_transpose(sk, cdc, spec, method, rcond)
        value = limit_moment(table, cls, phi, method)
    elif route in ("backprop", "naive"):
        fwd, ext = split_extension(sk)
        table, _ = compute_limits_backprop(fwd, ext, cdc, spec, method, rcond, strict=route == "backprop")
        value = limit_moment(table, cls, phi, method)
    else:
        value = general_limit_moment(sk, cdc, spec, cls, phi, method, rcond=rcond)
    log.debug(f"theory via {route}: {value}")
    return value, route


@dataclass
class SimulationReport:
    rows: List[ReportRow]
    trials: int
    seed: int
    widths: List[Dict[str, int]]
    trial_seeds: List[int] = field(default_factory=list)

    def rows_for(self, quantity: str, route: Optional[str] = None) -> List[ReportRow]:
        return [row for row in self.rows if row.quantity == quantity and (route is None or row.route == route)]

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "widths": self.widths,
            "trial_seeds": self.trial_seeds,
        }


def _default_reference(cdc, phis):
    for _, phi in phis:
        if phi.leaves:
            return cdc.class_of[phi.leaves[0]]
    return cdc.class_ids[0]


def convergence_study(
    sk: Skeleton,
    cdc: CdcPartition,
    spec: SamplingSpec,
    phis: Union[Mapping[str, ExprDag], Sequence[Tuple[str, ExprDag]]],
    widths: Sequence[int],
    trials: int = 10,
    seed: int = 0,
    coupled: bool = False,
    workers: int = 1,
    routes: Sequence[str] = ("auto",),
    reference: Optional[str] = None,
    width_cap: Optional[int] = None,
    method: Optional[ExpectationMethod] = None,
    rcond: float = PINV_RCOND,
) -> SimulationReport:
    """
    Mean and standard error over ``trials`` realizations of every measured
    quantity at every width of the schedule, next to its limit.

    Widths are those of the ``reference`` class; the other classes follow the
    declared ratios. Trial ``t`` at schedule position ``w`` draws from the key
    ``(w, t)``, or ``(t,)`` in coupled mode so that all widths share one
    infinite array, hence results do not depend on ``workers``.
    ``rcond`` is the pseudo-inverse cutoff of the limit computations.
    """
    phis = list(phis.items()) if isinstance(phis, Mapping) else list(phis)
    widths = [int(n) for n in widths]
    if not widths or any(b <= a for a, b in zip(widths, widths[1:])):
        raise ProgramError("width schedule must be non-empty and increasing")
    if trials < 2:
        raise ProgramError("at least two trials are needed for a standard error")
    reference = reference or _default_reference(cdc, phis)
    routes = list(routes) or [None]
    theory: Dict[Tuple[str, Optional[str]], Tuple[Optional[float], Optional[str]]] = {}
    for name, phi in phis:
        for route in routes:
            if route is None:
                theory[(name, route)] = (None, None)
            else:
                theory[(name, route)] = theory_value(sk, cdc, spec, phi, method=method, route=route, rcond=rcond)
    rows: List[ReportRow] = []
    profiles: List[Dict[str, int]] = []
    trial_seeds: List[int] = []
    streams = SeededStreams(seed)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for w, n in enumerate(widths):
            profile = class_widths(cdc, spec, n, reference, width_cap)
            profiles.append(profile)
            keys = [(t,) if coupled else (w, t) for t in range(trials)]
            trial_seeds.extend(streams.derived_seed(*key) for key in keys)

            def trial(key, profile=profile):
                r = realize(sk, cdc, spec, profile, seed, key, coupled)
                return [empirical_moment(r, None, phi) for _, phi in phis]

            samples = np.array(list(pool.map(trial, keys)))
            means = samples.mean(axis=0)
            stderrs = samples.std(axis=0, ddof=1) / math.sqrt(trials)
            log.info(f"width {n}: {trials} trials done")
            for j, (name, _) in enumerate(phis):
                for route in routes:
                    value, used = theory[(name, route)]
                    rows.append(ReportRow(name, n, float(means[j]), float(stderrs[j]), value, used))
    return SimulationReport(rows, trials, seed, profiles, trial_seeds)
