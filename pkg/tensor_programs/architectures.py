"""
Program builders for common architectures.

Every builder writes the program in the DSL and parses it back, so the
generated text is what ``tp check`` would see. Width classes are named
``n1 .. nL`` after the hidden layers (``n`` when all layers share a width),
input indices are 1-based and measures are named after the kernel entries
they estimate.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from tensor_programs import nonlinearities
from tensor_programs.errors import ProgramError
from tensor_programs.gaussian import PSD_TOL
from tensor_programs.limits import SamplingSpec
from tensor_programs.program import CdcPartition, Skeleton, compute_cdc, parse_program

log = logging.getLogger(__name__)

VARIANTS = ("mlp", "mlp_backward", "resnet", "simple_rnn", "batchnorm_forward", "cnn1d_circular")
READOUTS = ("linear", "gmp")

Scales = Union[float, Sequence[float]]


def _scales(value: Scales, count: int, what: str) -> Tuple[float, ...]:
    if np.isscalar(value):
        values = (float(value),) * count
    else:
        values = tuple(float(v) for v in value)
    if len(values) != count:
        raise ProgramError(f"{what} needs {count} values, got {len(values)}")
    if any(v < 0 for v in values):
        raise ProgramError(f"{what} must be non-negative")
    return values


def _num(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class ArchSpec:
    """
    Architecture, initialization and input set of a network.

    ``sigma_w`` holds one standard deviation per layer plus the readout (a
    scalar is repeated), ``sigma_b`` one per layer. ``ratios`` are the hidden
    widths relative to the first hidden layer. Convolutional inputs are
    reshaped to ``(pixels, channels)`` and recurrent inputs to
    ``(depth, features)``.
    """

    variant: str = "mlp"
    depth: int = 2
    activation: str = "tanh"
    inputs: Tuple[Tuple[float, ...], ...] = ((1.0,),)
    sigma_w: Scales = 1.0
    sigma_b: Scales = 0.0
    ratios: Tuple[float, ...] = ()
    sigma_v: float = 1.0
    sigma_a: float = 0.0
    sigma_u: float = 1.0
    sigma_s0: float = 1.0
    tied: bool = True
    readout: str = "linear"
    kernel_weights: Tuple[float, ...] = (0.5, 0.5)
    pixels: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ProgramError(f"unsupported variant '{self.variant}', expected one of {', '.join(VARIANTS)}")
        if self.readout not in READOUTS:
            raise ProgramError(f"unsupported readout '{self.readout}'")
        if int(self.depth) < 1:
            raise ProgramError("depth must be at least 1")
        object.__setattr__(self, "depth", int(self.depth))
        fn = nonlinearities.get_nonlinearity(self.activation)
        if fn.arity != 1 or fn.nparams != 0:
            raise ProgramError(f"activation '{self.activation}' must be a unary function without parameters")
        inputs = tuple(tuple(float(v) for v in np.ravel(x)) for x in self.inputs)
        if not inputs or not inputs[0]:
            raise ProgramError("at least one non-empty input is needed")
        if len({len(x) for x in inputs}) != 1:
            raise ProgramError("inputs must share a dimension")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "sigma_w", _scales(self.sigma_w, self.depth + 1, "sigma_w"))
        object.__setattr__(self, "sigma_b", _scales(self.sigma_b, self.depth, "sigma_b"))
        ratios = tuple(float(r) for r in self.ratios) or (1.0,) * self.depth
        if len(ratios) != self.depth or any(r <= 0 for r in ratios):
            raise ProgramError(f"ratios needs {self.depth} positive values")
        object.__setattr__(self, "ratios", tuple(r / ratios[0] for r in ratios))
        weights = tuple(float(v) for v in self.kernel_weights)
        if self.variant == "cnn1d_circular":
            if len(weights) < 1 or any(v < 0 for v in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ProgramError("kernel weights must be non-negative and sum to 1")
            if self.pixels < len(weights) or self.dim % self.pixels:
                raise ProgramError(f"input dimension {self.dim} does not split into {self.pixels} pixels")
        if self.variant == "simple_rnn" and self.dim % self.depth:
            raise ProgramError(f"input dimension {self.dim} does not split into {self.depth} steps")
        if self.variant == "batchnorm_forward" and len(inputs) < 2:
            raise ProgramError("batchnorm needs a batch of at least 2 inputs")
        object.__setattr__(self, "kernel_weights", weights)

    @property
    def dim(self) -> int:
        return len(self.inputs[0])

    @property
    def batch(self) -> int:
        return len(self.inputs)

    def weight_std(self, layer: int) -> float:
        """
        Layers are 1-based; ``depth + 1`` is the readout.
        """
        return self.sigma_w[layer - 1]

    def bias_std(self, layer: int) -> float:
        return self.sigma_b[layer - 1]

    def ratio(self, layer: int) -> float:
        return self.ratios[layer - 1]

    def input_array(self) -> np.ndarray:
        return np.array(self.inputs)

    def input_gram(self) -> np.ndarray:
        """
        ``<x_i, x_j> / dim`` over the input set.
        """
        x = self.input_array()
        return x @ x.T / self.dim

    def pixel_gram(self) -> np.ndarray:
        """
        ``<x_{a, p}, x_{b, q}> / channels`` indexed by ``a * pixels + p``.
        """
        x = self.input_array().reshape(self.batch * self.pixels, -1)
        return x @ x.T / x.shape[1]

    def step_gram(self) -> np.ndarray:
        """
        ``<x^t_a, x^s_b> / features`` indexed by ``a * depth + (t - 1)``.
        """
        x = self.input_array().reshape(self.batch * self.depth, -1)
        return x @ x.T / x.shape[1]


class _Writer:
    def __init__(self, syntax: str = "original"):
        self.body: List[str] = [f"syntax {syntax}"]
        self.directives: List[str] = []

    def line(self, text: str, comment: str = ""):
        self.body.append(text + (f"  # {comment}" if comment else ""))

    def directive(self, text: str):
        self.directives.append(text)

    def cov(self, names: Sequence[str], matrix: np.ndarray):
        for i, a in enumerate(names):
            for j in range(i, len(names)):
                self.directive(f"cov {a} {names[j]} = {_num(matrix[i, j])}")

    def measure(self, name: str, coefficient: float, terms: Sequence[Tuple[str, str]]):
        products = " + ".join(f"{a} * {b}" for a, b in terms)
        self.directive(f"measure {name} = {_num(coefficient)} * ({products})")

    def text(self) -> str:
        return "\n".join(self.body + self.directives) + "\n"


def _ratios(w: _Writer, a: ArchSpec):
    for layer in range(2, a.depth + 1):
        if a.ratio(layer) != 1.0:
            w.directive(f"ratio n{layer} / n1 = {_num(a.ratio(layer))}")


def _pairs(count: int):
    return [(i, j) for i in range(1, count + 1) for j in range(i, count + 1)]


def _first_layer(w: _Writer, a: ArchSpec):
    names = [f"Wx1_{i}" for i in range(1, a.batch + 1)]
    for name in names:
        w.line(f"input vec {name} : n1", "first layer weights times input")
    w.line("input vec b1 : n1")
    w.cov(names, a.weight_std(1) ** 2 * a.input_gram())
    w.directive(f"cov b1 b1 = {_num(a.bias_std(1) ** 2)}")


def _hidden_layer(w: _Writer, a: ArchSpec, layer: int):
    w.line(f"input mat W{layer} : n{layer} x n{layer - 1}")
    w.line(f"input vec b{layer} : n{layer}")
    w.directive(f"sigma W{layer} = {_num(a.weight_std(layer))}")
    w.directive(f"cov b{layer} b{layer} = {_num(a.bias_std(layer) ** 2)}")


def _mlp(a: ArchSpec) -> _Writer:
    w = _Writer()
    act = a.activation
    L = a.depth
    _first_layer(w, a)
    for i in range(1, a.batch + 1):
        w.line(f"h1_{i} = Wx1_{i} + b1")
        w.line(f"x1_{i} = {act}(h1_{i})")
    for layer in range(2, L + 1):
        _hidden_layer(w, a, layer)
        for i in range(1, a.batch + 1):
            w.line(f"Wx{layer}_{i} = W{layer} * x{layer - 1}_{i}")
            w.line(f"h{layer}_{i} = Wx{layer}_{i} + b{layer}")
            w.line(f"x{layer}_{i} = {act}(h{layer}_{i})")
    _ratios(w, a)
    if a.readout == "gmp":
        for i, j in _pairs(a.batch):
            w.measure(f"pool_{i}_{j}", 1.0, [(f"x{L}_{i}", f"x{L}_{j}")])
    else:
        for i, j in _pairs(a.batch):
            w.measure(f"gp_{i}_{j}", a.weight_std(L + 1) ** 2, [(f"x{L}_{i}", f"x{L}_{j}")])
    if a.variant == "mlp_backward":
        _backward(w, a)
    return w


def _backward(w: _Writer, a: ArchSpec):
    act = a.activation
    L = a.depth
    if f"{act}_bwd" not in nonlinearities.registered_names():
        raise ProgramError(f"activation '{act}' has no registered derivative to backpropagate")
    w.line("backward")
    w.line(f"input vec v : n{L}", "readout weights")
    w.directive(f"cov v v = {_num(a.weight_std(L + 1) ** 2)}")
    for i in range(1, a.batch + 1):
        w.line(f"dh{L}_{i} = {act}_bwd(h{L}_{i}, v)")
    for layer in range(L, 1, -1):
        w.line(f"trans W{layer}T = W{layer}")
        for i in range(1, a.batch + 1):
            w.line(f"dx{layer - 1}_{i} = W{layer}T * dh{layer}_{i}")
            w.line(f"dh{layer - 1}_{i} = {act}_bwd(h{layer - 1}_{i}, dx{layer - 1}_{i})")
    for layer in range(1, L + 1):
        for i, j in _pairs(a.batch):
            w.measure(f"pi{layer}_{i}_{j}", 1.0, [(f"dh{layer}_{i}", f"dh{layer}_{j}")])


def _resnet(a: ArchSpec) -> _Writer:
    w = _Writer()
    act = a.activation
    L = a.depth
    names = [f"x0_{i}" for i in range(1, a.batch + 1)]
    for name in names:
        w.line(f"input vec {name} : n", "network input")
    w.cov(names, a.input_gram())
    for layer in range(1, L + 1):
        w.line(f"input mat W{layer} : n x n")
        w.line(f"input vec b{layer} : n")
        w.directive(f"sigma W{layer} = {_num(a.weight_std(layer))}")
        w.directive(f"cov b{layer} b{layer} = {_num(a.bias_std(layer) ** 2)}")
        for i in range(1, a.batch + 1):
            w.line(f"Wx{layer}_{i} = W{layer} * x{layer - 1}_{i}")
            w.line(f"h{layer}_{i} = Wx{layer}_{i} + b{layer}")
            w.line(f"p{layer}_{i} = {act}(h{layer}_{i})")
        w.line(f"input mat V{layer} : n x n", "residual branch weights")
        w.line(f"input vec a{layer} : n")
        w.directive(f"sigma V{layer} = {_num(a.sigma_v)}")
        w.directive(f"cov a{layer} a{layer} = {_num(a.sigma_a ** 2)}")
        for i in range(1, a.batch + 1):
            w.line(f"Vp{layer}_{i} = V{layer} * p{layer}_{i}")
            w.line(f"x{layer}_{i} = Vp{layer}_{i} + x{layer - 1}_{i} + a{layer}", "merge into the main branch")
    for i, j in _pairs(a.batch):
        w.measure(f"gp_{i}_{j}", a.weight_std(L + 1) ** 2, [(f"x{L}_{i}", f"x{L}_{j}")])
    return w


def _simple_rnn(a: ArchSpec) -> _Writer:
    w = _Writer()
    act = a.activation
    T = a.depth
    w.line("input vec s0 : n", "hidden state at t=0")
    w.directive(f"cov s0 s0 = {_num(a.sigma_s0 ** 2)}")
    if a.tied:
        w.line("input vec b : n")
        w.line("input mat W : n x n", "weights shared by every step")
        w.directive(f"sigma W = {_num(a.weight_std(1))}")
        w.directive(f"cov b b = {_num(a.bias_std(1) ** 2)}")
    names = [f"u{t}_{i}" for i in range(1, a.batch + 1) for t in range(1, T + 1)]
    for t in range(1, T + 1):
        weights, bias = ("W", "b") if a.tied else (f"W{t}", f"b{t}")
        if not a.tied:
            w.line(f"input vec {bias} : n")
            w.line(f"input mat {weights} : n x n")
            w.directive(f"sigma {weights} = {_num(a.weight_std(t))}")
            w.directive(f"cov {bias} {bias} = {_num(a.bias_std(t) ** 2)}")
        for i in range(1, a.batch + 1):
            w.line(f"input vec u{t}_{i} : n", f"affine transform of input {i} at t={t}")
        if t == 1:
            w.line(f"g1 = {weights} * s0")
        for i in range(1, a.batch + 1):
            product = "g1" if t == 1 else f"g{t}_{i}"
            if t > 1:
                w.line(f"{product} = {weights} * s{t - 1}_{i}")
            w.line(f"z{t}_{i} = {product} + {bias} + u{t}_{i}")
            w.line(f"s{t}_{i} = {act}(z{t}_{i})", f"hidden state at t={t}")
    # names are input-major, matching the rows of step_gram
    w.cov(names, a.sigma_u**2 * a.step_gram() + a.sigma_a**2)
    for i, j in _pairs(a.batch):
        w.measure(f"pre{T}_{i}_{j}", 1.0, [(f"z{T}_{i}", f"z{T}_{j}")])
    return w


def _batchnorm(a: ArchSpec) -> _Writer:
    w = _Writer()
    act = a.activation
    L = a.depth
    B = a.batch
    _first_layer(w, a)
    for i in range(1, B + 1):
        w.line(f"h1_{i} = Wx1_{i} + b1")
    for layer in range(1, L + 1):
        if layer > 1:
            _hidden_layer(w, a, layer)
            for i in range(1, B + 1):
                w.line(f"Wx{layer}_{i} = W{layer} * x{layer - 1}_{i}")
                w.line(f"h{layer}_{i} = Wx{layer}_{i} + b{layer}")
        batch = ", ".join(f"h{layer}_{i}" for i in range(1, B + 1))
        for i in range(1, B + 1):
            w.line(f"x{layer}_{i} = batchnorm_{act}[{i}]({batch})", f"layer {layer} input {i} activations")
    _ratios(w, a)
    for i, j in _pairs(B):
        w.measure(f"gp_{i}_{j}", a.weight_std(L + 1) ** 2, [(f"x{L}_{i}", f"x{L}_{j}")])
    return w


def _cnn(a: ArchSpec) -> _Writer:
    w = _Writer()
    act = a.activation
    L = a.depth
    s = a.pixels
    kernel = range(len(a.kernel_weights))
    images = range(1, a.batch + 1)
    names = []
    for m in images:
        for k in kernel:
            for p in range(1, s + 1):
                names.append(f"Wx1_k{k}_p{p}_{m}")
                w.line(f"input vec Wx1_k{k}_p{p}_{m} : n1", f"kernel offset {k} applied to pixel {p}")
    gram = a.pixel_gram()
    cov = np.zeros((len(names), len(names)))
    index = {name: i for i, name in enumerate(names)}
    for m in images:
        for q in images:
            for k in kernel:
                for p in range(1, s + 1):
                    for r in range(1, s + 1):
                        value = a.weight_std(1) ** 2 * a.kernel_weights[k]
                        value *= gram[(m - 1) * s + p - 1, (q - 1) * s + r - 1]
                        cov[index[f"Wx1_k{k}_p{p}_{m}"], index[f"Wx1_k{k}_p{r}_{q}"]] = value
    w.cov(names, cov)
    _cnn_activations(w, a, 1)
    for layer in range(2, L + 1):
        for k in kernel:
            w.line(f"input mat W{layer}_k{k} : n{layer} x n{layer - 1}")
            w.directive(f"sigma W{layer}_k{k} = {_num(a.weight_std(layer) * np.sqrt(a.kernel_weights[k]))}")
        for m in images:
            for k in kernel:
                for p in range(1, s + 1):
                    w.line(f"Wx{layer}_k{k}_p{p}_{m} = W{layer}_k{k} * x{layer - 1}_p{p}_{m}")
        _cnn_activations(w, a, layer)
    _ratios(w, a)
    for m, q in _pairs(a.batch):
        terms = [(f"x{L}_p{p}_{m}", f"x{L}_p{p}_{q}") for p in range(1, s + 1)]
        w.measure(f"gp_{m}_{q}", a.weight_std(L + 1) ** 2 / s, terms)
    return w


def _cnn_activations(w: _Writer, a: ArchSpec, layer: int):
    s = a.pixels
    images = range(1, a.batch + 1)
    bias = a.bias_std(layer) > 0
    if bias:
        w.line(f"input vec b{layer} : n{layer}")
        w.directive(f"cov b{layer} b{layer} = {_num(a.bias_std(layer) ** 2)}")
    for m in images:
        for p in range(1, s + 1):
            terms = [f"Wx{layer}_k{k}_p{(p - 1 + k) % s + 1}_{m}" for k in range(len(a.kernel_weights))]
            if bias:
                terms.append(f"b{layer}")
            w.line(f"h{layer}_p{p}_{m} = {' + '.join(terms)}", f"layer {layer} pixel {p} preactivations")
    for m in images:
        for p in range(1, s + 1):
            w.line(f"x{layer}_p{p}_{m} = {a.activation}(h{layer}_p{p}_{m})")


_BUILDERS = {
    "mlp": _mlp,
    "mlp_backward": _mlp,
    "resnet": _resnet,
    "simple_rnn": _simple_rnn,
    "batchnorm_forward": _batchnorm,
    "cnn1d_circular": _cnn,
}


def program_text(a: ArchSpec) -> str:
    """
    DSL text of the network described by ``a``.
    """
    return _BUILDERS[a.variant](a).text()


def build_program(a: ArchSpec, psd_tol: float = PSD_TOL) -> Tuple[Skeleton, CdcPartition, SamplingSpec]:
    text = program_text(a)
    sk = parse_program(text)
    cdc = compute_cdc(sk)
    spec = SamplingSpec.from_skeleton(sk, cdc, psd_tol)
    log.info(f"built {a.variant} program with {len(sk)} lines and {len(cdc.class_ids)} width classes")
    return sk, cdc, spec
