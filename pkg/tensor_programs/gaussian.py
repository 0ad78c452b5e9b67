"""
Finite-dimensional Gaussian toolkit: expectations of registered functions,
the V transform, pseudo-inverses, conditioning and Stein's lemma.
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache, reduce
from typing import Callable, Hashable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import linalg

from tensor_programs.errors import MissingDerivative, NumericError
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import DerivativeTerm, ExprDag, VarId, VarKind
from tensor_programs.rng import stream

log = logging.getLogger(__name__)

PSD_TOL = 1e-8
PINV_RCOND = 1e-10
QUAD_POINTS = 40
QUAD_DIM_MAX = 3
MC_SAMPLES = 200_000

METHOD_KINDS = ("auto", "quadrature", "monte_carlo")

_DELTA_LABEL = "__delta__"


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """
    Law of a labelled Gaussian vector. The covariance may be singular but must
    be positive semi-definite up to ``psd_tol`` relative to its largest
    diagonal entry.
    """

    mean: np.ndarray
    cov: np.ndarray
    labels: Tuple[Hashable, ...]
    psd_tol: float = PSD_TOL

    def __post_init__(self):
        labels = tuple(self.labels)
        k = len(labels)
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (k,) or cov.size != k * k:
            raise NumericError(f"dimension mismatch: {k} labels, mean of shape {mean.shape}, cov of shape {cov.shape}")
        cov = cov.reshape(k, k)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NumericError("non-finite Gaussian parameters")
        if len(set(labels)) != k:
            raise NumericError("duplicate labels in Gaussian law")
        scale = max(float(np.max(np.abs(np.diag(cov)), initial=0.0)), np.finfo(float).tiny)
        if k and np.max(np.abs(cov - cov.T)) > self.psd_tol * max(scale, 1.0):
            raise NumericError("covariance is not symmetric")
        cov = (cov + cov.T) / 2
        if k and np.linalg.eigvalsh(cov)[0] < -self.psd_tol * scale:
            raise NumericError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_positions", {label: i for i, label in enumerate(labels)})

    @property
    def dim(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self._positions[label]
        except KeyError:
            raise NumericError(f"dimension mismatch: no law for {label}") from None

    def has(self, label) -> bool:
        return label in self._positions

    def marginal(self, labels: Sequence[Hashable]) -> "GaussianSpec":
        positions = [self.index(label) for label in labels]
        return GaussianSpec(
            self.mean[positions],
            self.cov[np.ix_(positions, positions)],
            tuple(labels),
            self.psd_tol,
        )

    def factor(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        ``(mean, L)`` with ``L @ L.T == cov`` and ``L`` of full column rank.
        Eigenvalues below the tolerance are dropped.
        """
        if not self.dim:
            return self.mean, np.zeros((0, 0))
        eigenvalues, vectors = np.linalg.eigh(self.cov)
        scale = max(float(np.max(np.diag(self.cov))), 0.0)
        keep = eigenvalues > self.psd_tol * scale
        return self.mean, vectors[:, keep] * np.sqrt(eigenvalues[keep])


@dataclass(frozen=True)
class ExpectationMethod:
    """
    How non-affine expectations are integrated.

    ``auto`` uses tensor Gauss-Hermite quadrature while the rank of the
    covariance is at most ``quad_dim_max`` and Monte Carlo beyond. Monte Carlo
    draws come from the stream ``(seed, *key)``.
    ``psd_tol`` is the semi-definiteness tolerance of the laws built from
    explicit covariances.
    """

    kind: str = "auto"
    points_per_dim: int = QUAD_POINTS
    samples: int = MC_SAMPLES
    seed: int = 0
    quad_dim_max: int = QUAD_DIM_MAX
    key: Tuple[int, ...] = ()
    psd_tol: float = PSD_TOL

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown expectation method '{self.kind}'")
        if self.points_per_dim < 1 or self.samples < 2:
            raise ValueError("quadrature points and Monte Carlo samples must be positive")

    @classmethod
    def quadrature(cls, points_per_dim: int = QUAD_POINTS, quad_dim_max: int = QUAD_DIM_MAX):
        return cls("quadrature", points_per_dim=points_per_dim, quad_dim_max=quad_dim_max)

    @classmethod
    def monte_carlo(cls, samples: int = MC_SAMPLES, seed: int = 0):
        return cls("monte_carlo", samples=samples, seed=seed)

    def keyed(self, *key: int) -> "ExpectationMethod":
        return replace(self, key=self.key + tuple(int(k) for k in key))


@dataclass(frozen=True, eq=False)
class Moments:
    gram: np.ndarray
    mean: np.ndarray
    method: str
    gram_stderr: Optional[np.ndarray] = None
    mean_stderr: Optional[np.ndarray] = None


@lru_cache(maxsize=32)
def _hermite_grid(dim: int, points: int) -> Tuple[np.ndarray, np.ndarray]:
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = hermgauss(points)
    nodes = x * math.sqrt(2.0)
    weights = w / math.sqrt(math.pi)
    grid = np.stack(np.meshgrid(*[nodes] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    return grid, reduce(np.multiply.outer, [weights] * dim).reshape(-1)


def _expect_affine(forms, gs: GaussianSpec) -> Moments:
    coefficients = np.array([[b.get(label, 0.0) for label in gs.labels] for _, b in forms])
    coefficients = coefficients.reshape(len(forms), gs.dim)
    means = np.array([c for c, _ in forms]) + coefficients @ gs.mean
    gram = coefficients @ gs.cov @ coefficients.T + np.outer(means, means)
    return Moments((gram + gram.T) / 2, means, "exact")


def expect(fns: Sequence[ExprDag], gs: GaussianSpec, method: Optional[ExpectationMethod] = None) -> Moments:
    """
    Second moments ``E[f_i f_j]`` and means ``E[f_i]`` of expressions over a
    Gaussian vector.

    Affine expressions are integrated exactly. Otherwise the integral runs
    over the eigen-factor of the covariance, whose rank decides between
    quadrature and Monte Carlo.
    """
    method = method or ExpectationMethod()
    fns = list(fns)
    leaves = sorted({leaf for fn in fns for leaf in fn.leaves})
    missing = [leaf for leaf in leaves if not gs.has(leaf)]
    if missing:
        raise NumericError(f"dimension mismatch: no law for {', '.join(map(str, missing))}")
    law = gs.marginal(leaves)
    forms = [fn.affine_form() for fn in fns]
    if all(form is not None for form in forms):
        return _expect_affine(forms, law)
    mean, factor = law.factor()
    rank = factor.shape[1]
    if method.kind == "quadrature" and rank > method.quad_dim_max:
        raise NumericError(f"quadrature over {rank} dimensions exceeds the limit of {method.quad_dim_max}")
    if method.kind == "quadrature" or (method.kind == "auto" and rank <= method.quad_dim_max):
        nodes, weights = _hermite_grid(rank, method.points_per_dim)
        kind = "quadrature"
    else:
        nodes = stream(method.seed, *method.key).standard_normal((method.samples, rank))
        weights = np.full(method.samples, 1.0 / method.samples)
        kind = "monte_carlo"
    points = mean + nodes @ factor.T
    values = {label: points[:, i] for i, label in enumerate(law.labels)}
    table = np.stack([np.broadcast_to(np.asarray(fn.evaluate(values), dtype=float), weights.shape) for fn in fns])
    if not np.all(np.isfinite(table)):
        raise NumericError("non-finite function values while integrating")
    weighted = table * weights
    gram = weighted @ table.T
    means = table @ weights
    if kind == "quadrature":
        return Moments((gram + gram.T) / 2, means, kind)
    count = len(weights)
    mean_stderr = table.std(axis=1, ddof=1) / math.sqrt(count)
    gram_stderr = np.empty_like(gram)
    for i in range(len(fns)):
        for j in range(i, len(fns)):
            gram_stderr[i, j] = gram_stderr[j, i] = (table[i] * table[j]).std(ddof=1) / math.sqrt(count)
    return Moments((gram + gram.T) / 2, means, kind, gram_stderr, mean_stderr)


def _unary_builder(phi) -> Callable[[ExprDag], ExprDag]:
    if isinstance(phi, str):
        phi = NonlinRef(phi)
    if isinstance(phi, NonlinRef):
        ref = phi
        return lambda x: ExprDag.apply(ref, x)
    return phi


def synthetic_labels(count: int) -> Tuple[VarId, ...]:
    return tuple(VarId(i + 1, VarKind.G) for i in range(count))


def v_op(
    phi: Union[str, NonlinRef, Callable[[ExprDag], ExprDag]],
    sigma: np.ndarray,
    method: Optional[ExpectationMethod] = None,
) -> np.ndarray:
    """
    ``V_phi(sigma)[i, j] = E phi(z_i) phi(z_j)`` for ``z ~ N(0, sigma)``.

    ``phi`` is a registered name, a reference or a function building the
    expression from a leaf, e.g. ``lambda x: ExprDag.apply("mul", f(x), g(x))``.
    """
    build = _unary_builder(phi)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    k = sigma.shape[0]
    labels = synthetic_labels(k)
    law = GaussianSpec(np.zeros(k), sigma, labels, (method or ExpectationMethod()).psd_tol)
    dags = [build(ExprDag.leaf(label)) for label in labels]
    out = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            moments = expect([dags[i], dags[j]], law, method)
            out[i, j] = out[j, i] = moments.gram[0, 1]
    return out


def pinv(m: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """
    Moore-Penrose pseudo-inverse, singular values below ``rcond * s_max``
    being treated as zero.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        m = np.atleast_2d(m)
    if m.size == 0:
        return np.zeros((m.shape[1], m.shape[0]))
    u, s, vh = linalg.svd(m, full_matrices=False)
    keep = s > rcond * s[0]
    return (vh[keep].T / s[keep]) @ u[:, keep].T


def numeric_rank(m: np.ndarray, rcond: float = PINV_RCOND) -> int:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0
    s = linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rcond * s[0])) if s[0] > 0 else 0


def condition_gaussian(
    gs: GaussianSpec,
    observed: Sequence[int],
    values: Sequence[float],
    rcond: float = PINV_RCOND,
) -> GaussianSpec:
    """
    Law of the unobserved coordinates given that the coordinates at the
    positions ``observed`` take ``values``.
    """
    observed = list(observed)
    rest = [i for i in range(gs.dim) if i not in set(observed)]
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape != (len(observed),):
        raise NumericError("dimension mismatch between observed coordinates and values")
    k11 = gs.cov[np.ix_(rest, rest)]
    k12 = gs.cov[np.ix_(rest, observed)]
    k22 = gs.cov[np.ix_(observed, observed)]
    gain = k12 @ pinv(k22, rcond)
    mean = gs.mean[rest] + gain @ (values - gs.mean[observed])
    cov = k11 - gain @ k12.T
    return GaussianSpec(mean, (cov + cov.T) / 2, tuple(gs.labels[i] for i in rest), gs.psd_tol)


@dataclass(frozen=True, eq=False)
class ConditionalMatrixLaw:
    """
    Law of ``E + proj_left @ A @ proj_right`` with ``A`` an independent copy
    of the unconditioned matrix.
    """

    mean: np.ndarray
    proj_left: np.ndarray
    proj_right: np.ndarray
    sigma: float

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        n1, n2 = self.mean.shape
        fresh = rng.standard_normal((n1, n2)) * (self.sigma / math.sqrt(n2))
        return self.mean + self.proj_left @ fresh @ self.proj_right


def conditional_matrix_law(
    shape: Tuple[int, int],
    sigma: float,
    q: np.ndarray,
    y: np.ndarray,
    p: np.ndarray,
    x: np.ndarray,
    tol: float = PSD_TOL,
    rcond: float = PINV_RCOND,
) -> ConditionalMatrixLaw:
    """
    Law of a matrix with iid ``N(0, sigma^2 / n2)`` entries conditioned on
    ``A @ q == y`` and ``A.T @ p == x``.
    """
    n1, n2 = shape
    q = np.asarray(q, dtype=float).reshape(n2, -1)
    y = np.asarray(y, dtype=float).reshape(n1, -1)
    p = np.asarray(p, dtype=float).reshape(n1, -1)
    x = np.asarray(x, dtype=float).reshape(n2, -1)
    if q.shape[1] != y.shape[1] or p.shape[1] != x.shape[1]:
        raise NumericError("dimension mismatch in matrix constraints")
    q_plus = pinv(q, rcond)
    p_plus = pinv(p, rcond)
    mean = y @ q_plus + p_plus.T @ x.T - p_plus.T @ p.T @ y @ q_plus
    scale = max(1.0, float(np.max(np.abs(y), initial=0.0)), float(np.max(np.abs(x), initial=0.0)))
    residual = max(
        float(np.max(np.abs(mean @ q - y), initial=0.0)),
        float(np.max(np.abs(mean.T @ p - x), initial=0.0)),
    )
    if residual > tol * scale * max(n1, n2):
        raise NumericError(f"inconsistent matrix constraints (residual {residual:.3g})")
    return ConditionalMatrixLaw(
        mean,
        np.eye(n1) - p @ p_plus,
        np.eye(n2) - q @ q_plus,
        float(sigma),
    )


def expect_terms(
    terms: Sequence[DerivativeTerm], gs: GaussianSpec, method: Optional[ExpectationMethod] = None
) -> float:
    """
    Expectation of a sum of derivative terms, Dirac masses included.
    """
    total = 0.0
    ordinary = [term.weight for term in terms if term.delta is None]
    if ordinary:
        total += float(np.sum(expect(ordinary, gs, method).mean))
    for term in terms:
        if term.delta is not None:
            total += _delta_expectation(term.weight, term.delta, gs, method)
    return total


def _delta_expectation(weight, delta, gs, method):
    # E[w delta(u)] = density of u at 0 times E[w | u = 0]
    form = delta.affine_form()
    if form is None:
        raise NumericError("Dirac mass of a non-affine expression")
    const, coefficients = form
    labels = tuple(sorted(set(weight.leaves) | {v for v, c in coefficients.items() if c}))
    law = gs.marginal(labels)
    b = np.array([coefficients.get(label, 0.0) for label in labels])
    mean_u = const + float(b @ law.mean)
    var_u = float(b @ law.cov @ b)
    scale = max(1.0, float(np.max(np.diag(law.cov), initial=0.0)))
    if var_u <= law.psd_tol * scale:
        raise NumericError("Dirac mass of a degenerate Gaussian")
    density = math.exp(-mean_u * mean_u / (2 * var_u)) / math.sqrt(2 * math.pi * var_u)
    cross = law.cov @ b
    augmented = GaussianSpec(
        np.append(law.mean, mean_u),
        np.block([[law.cov, cross[:, None]], [cross[None, :], np.array([[var_u]])]]),
        labels + (_DELTA_LABEL,),
        law.psd_tol,
    )
    conditional = condition_gaussian(augmented, [len(labels)], [0.0])
    return density * float(expect([weight], conditional, method).mean[0])


def _spanning_subset(cov, target, tol):
    scale = max(float(np.max(np.diag(cov), initial=0.0)), np.finfo(float).tiny)
    if cov[target, target] <= tol * scale:
        return None
    chosen = [target]
    for i in range(cov.shape[0]):
        if i == target:
            continue
        candidate = chosen + [i]
        if np.linalg.eigvalsh(cov[np.ix_(candidate, candidate)])[0] > tol * scale:
            chosen = candidate
    return chosen


def stein_derivative(
    fn: ExprDag,
    gs: GaussianSpec,
    wrt: Hashable,
    method: Optional[ExpectationMethod] = None,
    route: str = "auto",
) -> float:
    """
    ``E[d fn / d z_wrt]``.

    The ``derivative`` route integrates the registered symbolic derivative.
    The ``stein`` route solves ``K grad = E[(Z - mu) fn]`` instead, restricted
    to a maximal subset of coordinates with non-singular covariance. ``auto``
    prefers the derivative and falls back to Stein's lemma when some function
    has no registered derivative.
    """
    if route not in ("auto", "derivative", "stein"):
        raise ValueError(f"unknown derivative route '{route}'")
    if route != "stein":
        try:
            terms = fn.derivative(wrt)
        except MissingDerivative:
            if route == "derivative":
                raise
            log.debug(f"no symbolic derivative for {fn!r}, using Stein's lemma")
        else:
            return expect_terms(terms, gs, method)
    leaves = list(fn.leaves)
    if wrt not in leaves:
        return 0.0
    law = gs.marginal(leaves)
    chosen = _spanning_subset(law.cov, leaves.index(wrt), law.psd_tol)
    if chosen is None:
        raise NumericError("cannot differentiate along a coordinate with zero variance")
    if len(chosen) < len(leaves):
        log.debug(f"Stein estimate restricted to {len(chosen)} of {len(leaves)} coordinates")
    probes = [ExprDag.leaf(leaves[i]) for i in chosen]
    moments = expect([fn] + probes, law, method)
    centered = moments.gram[0, 1:] - moments.mean[0] * law.mean[chosen]
    gradient = linalg.solve(law.cov[np.ix_(chosen, chosen)], centered, assume_a="pos")
    return float(gradient[0])
