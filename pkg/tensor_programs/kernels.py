"""
Closed-form kernels of wide networks: the Gaussian process kernels, the
neural tangent kernel (linear and mean-pooled readouts) and the forward and
backward signal propagation recursions, together with finite-width oracles
that estimate the same quantities from explicit forward and backward passes.

Parameters are the raw weights: ``W^l`` has iid ``N(0, sigma_w^2)`` entries
and acts as ``W^l x / sqrt(fan_in)``.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from tensor_programs import nonlinearities
from tensor_programs.architectures import ArchSpec
from tensor_programs.errors import MissingDerivative, NumericError, ProgramError
from tensor_programs.gaussian import (
    PSD_TOL,
    ExpectationMethod,
    GaussianSpec,
    expect,
    expect_terms,
    synthetic_labels,
    v_op,
)
from tensor_programs.nonlinearities import NonlinRef
from tensor_programs.program import ExprDag
from tensor_programs.rng import SeededStreams

log = logging.getLogger(__name__)

MLP_VARIANTS = ("mlp", "mlp_backward")


@dataclass(frozen=True, eq=False)
class SignalPropagation:
    """
    ``sigma[l - 1]`` is the preactivation kernel of layer ``l``. For MLPs and
    CNNs ``pi[l - 1]`` is the kernel of the gradients at the preactivations
    of layer ``l``; for residual networks ``pi[l]`` is the kernel of the
    gradients at the block output ``x^l``, ``l = 0 .. L``, and
    ``sigma_tilde[l]`` the kernel of ``x^l``.
    """

    sigma: List[np.ndarray]
    pi: Optional[List[np.ndarray]] = None
    sigma_tilde: Optional[List[np.ndarray]] = None


@dataclass(frozen=True, eq=False)
class KernelEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    draws: int
    width: int


def check_kernel(name: str, k: np.ndarray, psd_tol: float = PSD_TOL) -> np.ndarray:
    """
    Symmetrized ``k``, refused when it is not symmetric positive
    semi-definite up to ``psd_tol`` relative to its largest diagonal entry.
    """
    k = np.asarray(k, dtype=float)
    scale = max(float(np.max(np.abs(np.diag(k)), initial=0.0)), 1.0)
    if np.max(np.abs(k - k.T), initial=0.0) > psd_tol * scale:
        raise NumericError(f"kernel {name} is not symmetric")
    k = (k + k.T) / 2
    smallest = float(np.linalg.eigvalsh(k)[0]) if k.size else 0.0
    if smallest < -psd_tol * scale:
        raise NumericError(f"kernel {name} is not positive semi-definite (eigenvalue {smallest:.3g})")
    return k


def _tol(method: Optional[ExpectationMethod]) -> float:
    return method.psd_tol if method is not None else PSD_TOL


def _prime(activation: str) -> str:
    name = nonlinearities.get_nonlinearity(activation).derivative
    if name is None:
        raise MissingDerivative(f"activation '{activation}' has no registered derivative")
    return name


def _require(a: ArchSpec, variants, what: str):
    if a.variant not in variants:
        raise ProgramError(f"{what} is not available for variant '{a.variant}'")


def _product(f: str, g: str):
    return lambda x: ExprDag.apply("mul", ExprDag.apply(f, x), ExprDag.apply(g, x))


def _diagonal_moment(dag_of, variance: float, method) -> float:
    # E of a sum of derivative terms at z ~ N(0, variance)
    label = synthetic_labels(1)[0]
    law = GaussianSpec([0.0], [[variance]], (label,), _tol(method))
    leaf = ExprDag.leaf(label)
    return expect_terms(dag_of(leaf).derivative(label), law, method)


# MLP


def mlp_sigma(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> List[np.ndarray]:
    """
    ``[Sigma^1, ..., Sigma^{L+1}]`` over the input set, ``Sigma^{L+1}`` being
    the kernel of the output Gaussian process (no readout bias).
    """
    _require(a, MLP_VARIANTS, "the MLP kernel")
    sigmas = [a.weight_std(1) ** 2 * a.input_gram() + a.bias_std(1) ** 2]
    for layer in range(2, a.depth + 1):
        vphi = v_op(a.activation, sigmas[-1], method)
        sigmas.append(a.weight_std(layer) ** 2 * vphi + a.bias_std(layer) ** 2)
    sigmas.append(a.weight_std(a.depth + 1) ** 2 * v_op(a.activation, sigmas[-1], method))
    return [check_kernel(f"Sigma^{i}", s, _tol(method)) for i, s in enumerate(sigmas, 1)]


def mlp_ntk(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> np.ndarray:
    """
    Limit of ``<grad_theta f(x), grad_theta f(x')>`` for the linear readout
    ``f = v . x^L / sqrt(n_L)``, weights and biases of every layer included.
    """
    _require(a, MLP_VARIANTS, "the MLP NTK")
    prime = _prime(a.activation)
    sigmas = mlp_sigma(a, method)
    L = a.depth
    # K^{l-1}: kernel of the inputs of layer l
    inputs = [a.input_gram()] + [v_op(a.activation, s, method) for s in sigmas[:L]]
    ntk = inputs[L].copy()
    grad = a.weight_std(L + 1) ** 2 * v_op(prime, sigmas[L - 1], method)
    for layer in range(L, 0, -1):
        if layer < L:
            grad = a.weight_std(layer + 1) ** 2 * v_op(prime, sigmas[layer - 1], method) * grad
        ntk += grad * (inputs[layer - 1] + 1.0)
    log.debug(f"NTK diagonal {np.diag(ntk)}")
    return check_kernel("NTK", ntk, _tol(method))


def gmp_coefficients(
    a: ArchSpec, sigmas: List[np.ndarray], method: Optional[ExpectationMethod] = None
) -> List[np.ndarray]:
    """
    Correction coefficients ``a^l`` (one per input) of the mean-pooled
    readout, ``l = 1 .. L-1``, indexed ``l - 1``.
    """
    L = a.depth
    prime = _prime(a.activation)
    coefficients: List[np.ndarray] = [np.zeros(a.batch) for _ in range(L - 1)]
    if L < 2:
        return coefficients

    def second(variance):
        return _diagonal_moment(lambda x: ExprDag.apply(prime, x), variance, method)

    def product(variance):
        return _diagonal_moment(_product(a.activation, prime), variance, method)

    alpha = a.ratio(L) / a.ratio(L - 1)
    coefficients[L - 2] = np.array([alpha * a.weight_std(L) ** 2 * second(sigmas[L - 1][i, i]) for i in range(a.batch)])
    for layer in range(L - 2, 0, -1):
        alpha = a.ratio(layer + 1) / a.ratio(layer)
        scale = np.array([product(sigmas[layer][i, i]) for i in range(a.batch)])
        coefficients[layer - 1] = alpha * a.weight_std(layer + 1) ** 2 * coefficients[layer] * scale
    return coefficients


def mlp_ntk_gmp(a: ArchSpec, method: Optional[ExpectationMethod] = None, corrections: bool = True) -> np.ndarray:
    """
    ``n_L`` times the NTK of ``f = mean(x^L)``.

    The backward pass reuses the forward weights, which adds the terms in
    ``a^l`` to the gradient-independence answer; ``corrections=False`` drops
    them. Odd activations make them vanish.
    """
    _require(a, MLP_VARIANTS, "the mean-pooled NTK")
    prime = _prime(a.activation)
    L = a.depth
    sigmas = mlp_sigma(a, method)[:L]
    inputs = [a.input_gram()] + [v_op(a.activation, s, method) for s in sigmas[: L - 1]]
    coefficients = gmp_coefficients(a, sigmas, method) if corrections else [np.zeros(a.batch)] * (L - 1)
    grad = v_op(prime, sigmas[L - 1], method)
    ntk = grad * (inputs[L - 1] + 1.0)
    for layer in range(L - 1, 0, -1):
        alpha = a.ratio(layer + 1) / a.ratio(layer)
        pi = alpha * a.weight_std(layer + 1) ** 2 * grad
        c = coefficients[layer - 1]
        grad = pi * v_op(prime, sigmas[layer - 1], method)
        if np.any(c):
            grad = grad + np.outer(c, c) * v_op(_product(a.activation, prime), sigmas[layer - 1], method)
        ntk += a.ratio(layer) / a.ratio(L) * grad * (inputs[layer - 1] + 1.0)
    return check_kernel("mean-pooled NTK", ntk, _tol(method))


# signal propagation


def _mlp_signal(a, backward, method):
    L = a.depth
    sigmas = mlp_sigma(a, method)[:L]
    if not backward:
        return SignalPropagation(sigmas)
    prime = _prime(a.activation)
    pis = [a.weight_std(L + 1) ** 2 * v_op(prime, sigmas[L - 1], method)]
    for layer in range(L - 1, 0, -1):
        alpha = a.ratio(layer + 1) / a.ratio(layer)
        pis.insert(0, alpha * a.weight_std(layer + 1) ** 2 * v_op(prime, sigmas[layer - 1], method) * pis[0])
    return SignalPropagation(sigmas, [check_kernel(f"Pi^{i}", p, _tol(method)) for i, p in enumerate(pis, 1)])


def resnet_sigma(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    ``([Sigma^1 .. Sigma^{L+1}], [Sigma~^0 .. Sigma~^L])`` of a residual
    network whose blocks add ``V phi(W x + b) + a`` to their input.
    """
    _require(a, ("resnet",), "the residual kernel")
    tildes = [a.input_gram()]
    sigmas = []
    for layer in range(1, a.depth + 1):
        sigmas.append(a.weight_std(layer) ** 2 * tildes[-1] + a.bias_std(layer) ** 2)
        branch = a.sigma_v**2 * v_op(a.activation, sigmas[-1], method)
        tildes.append(tildes[-1] + branch + a.sigma_a**2)
    sigmas.append(a.weight_std(a.depth + 1) ** 2 * tildes[-1])
    return (
        [check_kernel(f"Sigma^{i}", s, _tol(method)) for i, s in enumerate(sigmas, 1)],
        [check_kernel(f"Sigma~^{i}", s, _tol(method)) for i, s in enumerate(tildes)],
    )


def _resnet_signal(a, backward, method):
    sigmas, tildes = resnet_sigma(a, method)
    sigmas = sigmas[:-1]
    if not backward:
        return SignalPropagation(sigmas, None, tildes)
    prime = _prime(a.activation)
    pis = [np.full((a.batch, a.batch), a.weight_std(a.depth + 1) ** 2)]
    for layer in range(a.depth, 0, -1):
        gain = a.weight_std(layer) ** 2 * a.sigma_v**2 * v_op(prime, sigmas[layer - 1], method)
        pis.insert(0, pis[0] * (1.0 + gain))
    return SignalPropagation(sigmas, [check_kernel(f"Pi^{i}", p, _tol(method)) for i, p in enumerate(pis)], tildes)


def batchnorm_v(activation: str, sigma: np.ndarray, method: Optional[ExpectationMethod] = None) -> np.ndarray:
    """
    ``E B(z) B(z)^T`` for ``z ~ N(0, sigma)`` over a batch, ``B`` being
    batch normalization followed by the activation.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    size = sigma.shape[0]
    labels = synthetic_labels(size)
    leaves = [ExprDag.leaf(label) for label in labels]
    dags = [ExprDag.apply(NonlinRef(f"batchnorm_{activation}", (i + 1,)), *leaves) for i in range(size)]
    return expect(dags, GaussianSpec(np.zeros(size), sigma, labels, _tol(method)), method).gram


def batchnorm_sigma(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> List[np.ndarray]:
    """
    ``[Sigma^1 .. Sigma^{L+1}]`` over the batch.
    """
    _require(a, ("batchnorm_forward",), "the batchnorm kernel")
    sigmas = [a.weight_std(1) ** 2 * a.input_gram() + a.bias_std(1) ** 2]
    for layer in range(2, a.depth + 2):
        vb = batchnorm_v(a.activation, sigmas[-1], method)
        bias = a.bias_std(layer) ** 2 if layer <= a.depth else 0.0
        sigmas.append(a.weight_std(layer) ** 2 * vb + bias)
    return [check_kernel(f"Sigma^{i}", s, _tol(method)) for i, s in enumerate(sigmas, 1)]


# 1-D circular convolutions; kernels are indexed by image * pixels + pixel


def _shift(k: np.ndarray, offset: int, images: int, pixels: int) -> np.ndarray:
    # entry (a p, b q) of the result is entry (a p+offset, b q+offset) of k
    blocks = k.reshape(images, pixels, images, pixels)
    blocks = np.roll(np.roll(blocks, -offset, axis=1), -offset, axis=3)
    return blocks.reshape(k.shape)


def _pool(k: np.ndarray, images: int, pixels: int) -> np.ndarray:
    return k.reshape(images, pixels, images, pixels).sum(axis=(1, 3))


def _convolve(a: ArchSpec, layer: int, k: np.ndarray) -> np.ndarray:
    out = sum(v * _shift(k, offset, a.batch, a.pixels) for offset, v in enumerate(a.kernel_weights))
    return a.weight_std(layer) ** 2 * out + a.bias_std(layer) ** 2


def cnn_sigma(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> List[np.ndarray]:
    """
    ``[Sigma^1 .. Sigma^L]`` over (image, pixel) pairs.
    """
    _require(a, ("cnn1d_circular",), "the convolutional kernel")
    sigmas = [_convolve(a, 1, a.pixel_gram())]
    for layer in range(2, a.depth + 1):
        sigmas.append(_convolve(a, layer, v_op(a.activation, sigmas[-1], method)))
    return [check_kernel(f"Sigma^{i}", s, _tol(method)) for i, s in enumerate(sigmas, 1)]


def cnn_gp(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> np.ndarray:
    """
    Output kernel of the convolutional network under a dense linear readout
    over all pixels and channels.
    """
    vphi = v_op(a.activation, cnn_sigma(a, method)[-1], method)
    diagonal = np.kron(np.ones((a.batch, a.batch)), np.eye(a.pixels))
    gp = a.weight_std(a.depth + 1) ** 2 / a.pixels * _pool(vphi * diagonal, a.batch, a.pixels)
    return check_kernel("CNN GP", gp, _tol(method))


def _cnn_backward(a, sigmas, method):
    prime = _prime(a.activation)
    L = a.depth
    diagonal = np.kron(np.ones((a.batch, a.batch)), np.eye(a.pixels))
    grads = [a.weight_std(L + 1) ** 2 / a.pixels * v_op(prime, sigmas[L - 1], method) * diagonal]
    for layer in range(L, 1, -1):
        spread = sum(v * _shift(grads[0], -offset, a.batch, a.pixels) for offset, v in enumerate(a.kernel_weights))
        grads.insert(0, a.weight_std(layer) ** 2 * v_op(prime, sigmas[layer - 2], method) * spread)
    return grads


def cnn_ntk(a: ArchSpec, method: Optional[ExpectationMethod] = None) -> np.ndarray:
    """
    NTK of the convolutional network with kernel weights, per-channel biases
    and the dense readout as parameters.
    """
    sigmas = cnn_sigma(a, method)
    grads = _cnn_backward(a, sigmas, method)
    inputs = [a.pixel_gram()] + [v_op(a.activation, s, method) for s in sigmas]
    diagonal = np.kron(np.ones((a.batch, a.batch)), np.eye(a.pixels))
    ntk = _pool(inputs[-1] * diagonal, a.batch, a.pixels) / a.pixels
    for layer in range(1, a.depth + 1):
        d = grads[layer - 1]
        ntk += _pool(d, a.batch, a.pixels)
        for offset in range(len(a.kernel_weights)):
            ntk += _pool(d * _shift(inputs[layer - 1], offset, a.batch, a.pixels), a.batch, a.pixels)
    return check_kernel("CNN NTK", ntk, _tol(method))


def signal_prop(a: ArchSpec, backward: bool = True, method: Optional[ExpectationMethod] = None) -> SignalPropagation:
    """
    Forward kernels and, with ``backward``, the gradient kernels under a
    Gaussian linear readout sampled independently of the other weights.
    """
    if a.variant in MLP_VARIANTS:
        return _mlp_signal(a, backward, method)
    if a.variant == "resnet":
        return _resnet_signal(a, backward, method)
    if a.variant == "cnn1d_circular":
        sigmas = cnn_sigma(a, method)
        grads = _cnn_backward(a, sigmas, method) if backward else None
        return SignalPropagation(sigmas, grads)
    if a.variant == "batchnorm_forward":
        if backward:
            raise ProgramError(
                "gradient kernels of batchnorm networks are not covered: "
                "the batchnorm Jacobian is singular at the origin"
            )
        return SignalPropagation(batchnorm_sigma(a, method)[:-1])
    raise ProgramError(f"signal propagation is not available for variant '{a.variant}'")


# finite-width oracles


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return nonlinearities.apply_nonlinearity(NonlinRef(name), x)


def _widths(a: ArchSpec, width: int) -> List[int]:
    return [max(1, int(round(width * a.ratio(layer)))) for layer in range(1, a.depth + 1)]


def _mlp_gram(a: ArchSpec, rng: np.random.Generator, widths: List[int], pooled: bool) -> np.ndarray:
    x = a.input_array()
    prime = _prime(a.activation)
    weights, biases, pre, acts = [], [], [], [x]
    fan_in = a.dim
    for layer, n in enumerate(widths, 1):
        weights.append(rng.standard_normal((n, fan_in)) * a.weight_std(layer))
        biases.append(rng.standard_normal(n) * a.bias_std(layer))
        pre.append(acts[-1] @ weights[-1].T / math.sqrt(fan_in) + biases[-1])
        acts.append(_act(a.activation, pre[-1]))
        fan_in = n
    n_last = widths[-1]
    if pooled:
        gram = np.zeros((a.batch, a.batch))
        delta = _act(prime, pre[-1]) / n_last
    else:
        readout = rng.standard_normal(n_last) * a.weight_std(a.depth + 1)
        gram = acts[-1] @ acts[-1].T / n_last
        delta = _act(prime, pre[-1]) * readout / math.sqrt(n_last)
    for layer in range(a.depth, 0, -1):
        fan_in = acts[layer - 1].shape[1]
        gram += (delta @ delta.T) * (acts[layer - 1] @ acts[layer - 1].T / fan_in + 1.0)
        if layer > 1:
            delta = _act(prime, pre[layer - 2]) * (delta @ weights[layer - 1]) / math.sqrt(fan_in)
    return gram * n_last if pooled else gram


def _estimate(a: ArchSpec, width: int, draws: int, seed: int, sample, key: int) -> KernelEstimate:
    if draws < 2:
        raise ProgramError("at least two draws are needed for a standard error")
    streams = SeededStreams(seed, (key,))
    samples = np.array([sample(streams.generator(d)) for d in range(draws)])
    return KernelEstimate(
        samples.mean(axis=0),
        samples.std(axis=0, ddof=1) / math.sqrt(draws),
        draws,
        width,
    )


def empirical_mlp_ntk(a: ArchSpec, width: int, draws: int = 20, seed: int = 0) -> KernelEstimate:
    """
    Parameter-gradient Gram matrix of finite MLPs, averaged over draws.
    """
    _require(a, MLP_VARIANTS, "the MLP NTK oracle")
    widths = _widths(a, width)
    return _estimate(a, width, draws, seed, lambda rng: _mlp_gram(a, rng, widths, False), 0)


def empirical_gmp_ntk(a: ArchSpec, width: int, draws: int = 20, seed: int = 0) -> KernelEstimate:
    """
    ``n_L`` times the parameter-gradient Gram matrix of ``mean(x^L)``.
    """
    _require(a, MLP_VARIANTS, "the mean-pooled NTK oracle")
    widths = _widths(a, width)
    return _estimate(a, width, draws, seed, lambda rng: _mlp_gram(a, rng, widths, True), 1)


def _cnn_gram(a: ArchSpec, rng: np.random.Generator, widths: List[int]) -> np.ndarray:
    prime = _prime(a.activation)
    s = a.pixels
    x = a.input_array().reshape(a.batch, s, -1)
    offsets = range(len(a.kernel_weights))
    weights, pre, acts = [], [], [x]
    for layer, n in enumerate(widths, 1):
        fan_in = acts[-1].shape[2]
        std = [a.weight_std(layer) * math.sqrt(v) for v in a.kernel_weights]
        weights.append([rng.standard_normal((n, fan_in)) * std[k] for k in offsets])
        bias = rng.standard_normal(n) * a.bias_std(layer)
        h = sum(np.roll(acts[-1], -k, axis=1) @ weights[-1][k].T for k in offsets) / math.sqrt(fan_in)
        pre.append(h + bias)
        acts.append(_act(a.activation, pre[-1]))
    n_last = widths[-1]
    readout = rng.standard_normal((s, n_last)) * a.weight_std(a.depth + 1)
    flat = acts[-1].reshape(a.batch, -1)
    gram = flat @ flat.T / (n_last * s)
    delta = _act(prime, pre[-1]) * readout / math.sqrt(n_last * s)
    for layer in range(a.depth, 0, -1):
        below = acts[layer - 1]
        fan_in = below.shape[2]
        summed = delta.sum(axis=1)
        gram += summed @ summed.T
        for k in offsets:
            g = np.einsum("api,apj->aij", delta, np.roll(below, -k, axis=1)) / math.sqrt(fan_in)
            gram += np.einsum("aij,bij->ab", g, g)
        if layer > 1:
            back = sum(np.roll(delta @ weights[layer - 1][k], k, axis=1) for k in offsets)
            delta = _act(prime, pre[layer - 2]) * back / math.sqrt(fan_in)
    return gram


def empirical_cnn_ntk(a: ArchSpec, width: int, draws: int = 20, seed: int = 0) -> KernelEstimate:
    _require(a, ("cnn1d_circular",), "the convolutional NTK oracle")
    widths = _widths(a, width)
    return _estimate(a, width, draws, seed, lambda rng: _cnn_gram(a, rng, widths), 2)
