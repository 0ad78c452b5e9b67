"""
Approximate message passing for compressed sensing and its state evolution.

The iteration is written in the general two-function form

    b^t = A q^t - lambda_t m^{t-1},    m^t = g(b^t, w),
    h^{t+1} = A^T m^t - xi_t q^t,      q^{t+1} = f(h^{t+1}, x0),

with ``A : n x N`` of iid ``N(0, 1/n)`` entries. The Onsager coefficients
are inner products, ``xi_t = <b^t, m^t> / (n s_t)`` and
``lambda_t = <h^t, q^t> / (n r_t)`` with ``s_t`` and ``r_t`` the empirical
second moments of ``b^t`` and ``h^t``, so ``f`` and ``g`` need no
derivative. ``f``, ``g`` and the initial condition ``q0`` are expressions in
the DSL expression language over ``h, x0``, ``b, w`` and ``x0`` respectively.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from tensor_programs.errors import NumericError, ProgramError
from tensor_programs.gaussian import ExpectationMethod, GaussianSpec, expect
from tensor_programs.program import ExprDag, parse_expression, parse_program
from tensor_programs.report import ReportRow
from tensor_programs.rng import SeededStreams

log = logging.getLogger(__name__)

# stream keys
_MATRIX = 0
_SIGNAL = 1
_NOISE = 2


@dataclass(frozen=True)
class AmpConfig:
    """
    ``delta = n / N``. ``x0`` has iid ``N(0, sigma_x0^2)`` and ``w`` iid
    ``N(0, sigma_w^2)`` coordinates. The defaults run soft thresholding on
    the pseudo-data ``x0 - h``, ``q`` being the estimation error.
    """

    delta: float = 0.64
    sigma_x0: float = 1.0
    sigma_w: float = 0.1
    f: str = "soft_threshold[0.5](x0 - h) - x0"
    g: str = "b - w"
    q0: str = "-x0"
    steps: int = 10
    N: int = 4000
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ProgramError("delta must be positive")
        if self.steps < 1:
            raise ProgramError("at least one step is needed")
        if self.N < 1 or self.n < 1:
            raise ProgramError("dimensions must be positive")
        if self.sigma_x0 < 0 or self.sigma_w < 0:
            raise ProgramError("standard deviations must be non-negative")

    @property
    def n(self) -> int:
        return max(1, int(round(self.delta * self.N)))


class _Functions:
    """
    ``f``, ``g`` and ``q0`` parsed against a two-line program declaring
    their arguments.
    """

    def __init__(self, cfg: AmpConfig):
        self.signal_side = parse_program("input vec h : N\ninput vec x0 : N\n")
        self.noise_side = parse_program("input vec b : n\ninput vec w : n\n")
        self.h, self.x0 = (self.signal_side.lookup(name) for name in ("h", "x0"))
        self.b, self.w = (self.noise_side.lookup(name) for name in ("b", "w"))
        self.f = self._parse(self.signal_side, cfg.f, "f")
        self.g = self._parse(self.noise_side, cfg.g, "g")
        self.q0 = self._parse(self.signal_side, cfg.q0, "q0")
        if self.h in self.q0.leaves:
            raise ProgramError("q0 may only depend on x0")

    @staticmethod
    def _parse(sk, text, what) -> ExprDag:
        try:
            return parse_expression(sk, text)
        except ProgramError as error:
            raise ProgramError(f"{what}: {error}") from None

    @staticmethod
    def _evaluate(dag: ExprDag, values: dict, size: int) -> np.ndarray:
        result = np.asarray(dag.evaluate({v: values[v] for v in dag.leaves}), dtype=float)
        return np.array(np.broadcast_to(result, (size,)))

    def signal(self, h, x0):
        return self._evaluate(self.f, {self.h: h, self.x0: x0}, x0.shape[0])

    def noise(self, b, w):
        return self._evaluate(self.g, {self.b: b, self.w: w}, w.shape[0])

    def initial(self, x0):
        return self._evaluate(self.q0, {self.x0: x0}, x0.shape[0])


@dataclass(frozen=True)
class AmpStep:
    """
    Coordinate averages at step ``t``: ``b_sq`` and ``m_sq`` of ``b^t`` and
    ``m^t``, ``h_sq`` and ``q_sq`` of ``h^{t+1}`` and ``q^{t+1}``.
    """

    t: int
    b_sq: float
    m_sq: float
    h_sq: float
    q_sq: float
    xi: float
    lam: float


@dataclass(eq=False)
class AmpResult:
    config: AmpConfig
    steps: List[AmpStep]
    iterates: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    matrix: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None


def _onsager(inner: float, normalizer: float, what: str) -> float:
    if normalizer > 0:
        return inner / normalizer
    if inner == 0:
        return 0.0
    raise NumericError(f"{what} is numerically zero")


def amp_run(cfg: AmpConfig, key: Tuple[int, ...] = (), keep_iterates: bool = False) -> AmpResult:
    """
    ``cfg.steps`` iterations on one draw of ``(A, x0, w)`` from the streams
    ``(cfg.seed, *key)``.
    """
    fns = _Functions(cfg)
    N, n = cfg.N, cfg.n
    streams = SeededStreams(cfg.seed, key)
    A = streams.generator(_MATRIX).standard_normal((n, N)) / math.sqrt(n)
    x0 = streams.generator(_SIGNAL).standard_normal(N) * cfg.sigma_x0
    w = streams.generator(_NOISE).standard_normal(n) * cfg.sigma_w
    q = fns.initial(x0)
    m_prev = np.zeros(n)
    lam = 0.0
    steps = []
    iterates: Dict[str, List[np.ndarray]] = {"b": [], "m": [], "h": [], "q": [q]}
    for t in range(cfg.steps):
        b = A @ q - lam * m_prev
        m = fns.noise(b, w)
        xi = _onsager(float(b @ m), float(b @ b), "the variance of b")
        h = A.T @ m - xi * q
        q = fns.signal(h, x0)
        lam = _onsager(float(h @ q), n * float(h @ h) / N, "the variance of h")
        steps.append(AmpStep(t, float(b @ b) / n, float(m @ m) / n, float(h @ h) / N, float(q @ q) / N, xi, lam))
        if keep_iterates:
            for name, value in (("b", b), ("m", m), ("h", h), ("q", q)):
                iterates[name].append(value)
        m_prev = m
        log.debug(f"step {t}: xi={xi:.6g}, lambda={lam:.6g}")
    if not keep_iterates:
        return AmpResult(cfg, steps)
    return AmpResult(cfg, steps, iterates, A, x0, w)


@dataclass(frozen=True, eq=False)
class StateEvolution:
    """
    ``sigma2[t]`` predicts the second moment of ``b^t``, ``tau2[t]`` that of
    ``h^{t+1}`` and ``error[t]`` that of ``q^{t+1}``.
    """

    sigma2: np.ndarray
    tau2: np.ndarray
    error: np.ndarray


def amp_state_evolution(cfg: AmpConfig, method: Optional[ExpectationMethod] = None) -> StateEvolution:
    """
    ``tau_t^2 = E g(sigma_t Z, W)^2`` and
    ``sigma_{t+1}^2 = E f(tau_t Z, X0)^2 / delta``, started from
    ``sigma_0^2 = E q0(X0)^2 / delta``.
    """
    fns = _Functions(cfg)
    method = method or ExpectationMethod.quadrature()

    def second_moment(dag, labels, variances):
        law = GaussianSpec(np.zeros(2), np.diag(variances), labels)
        return float(expect([dag], law, method).gram[0, 0])

    signal_labels = (fns.h, fns.x0)
    sigma2, tau2, error = [], [], []
    current = second_moment(fns.q0, signal_labels, [0.0, cfg.sigma_x0**2]) / cfg.delta
    for _ in range(cfg.steps):
        sigma2.append(current)
        tau2.append(second_moment(fns.g, (fns.b, fns.w), [current, cfg.sigma_w**2]))
        error.append(second_moment(fns.f, signal_labels, [tau2[-1], cfg.sigma_x0**2]))
        current = error[-1] / cfg.delta
    return StateEvolution(np.array(sigma2), np.array(tau2), np.array(error))


def amp_study(
    cfg: AmpConfig,
    trials: int = 10,
    workers: int = 1,
    method: Optional[ExpectationMethod] = None,
) -> List[ReportRow]:
    """
    Empirical second moments of ``b^t`` and ``h^{t+1}`` over ``trials``
    independent runs next to their state evolution predictions. Trial ``i``
    draws from the key ``(i,)``.
    """
    if trials < 2:
        raise ProgramError("at least two trials are needed for a standard error")
    se = amp_state_evolution(cfg, method)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs = list(pool.map(lambda i: amp_run(cfg, (i,)), range(trials)))
    rows = []
    for t in range(cfg.steps):
        for quantity, theory, values in (
            (f"b_sq[{t}]", se.sigma2[t], [run.steps[t].b_sq for run in runs]),
            (f"h_sq[{t + 1}]", se.tau2[t], [run.steps[t].h_sq for run in runs]),
        ):
            values = np.array(values)
            stderr = values.std(ddof=1) / math.sqrt(trials)
            row = ReportRow(quantity, cfg.N, float(values.mean()), float(stderr), float(theory), "state_evolution")
            rows.append(row)
    log.info(f"{trials} AMP runs of {cfg.steps} steps at N={cfg.N}")
    return rows
