"""
Registry of the named coordinatewise functions a program may apply.

Every entry knows how to evaluate itself on numpy arrays and, when it is
differentiable, how to express its partial derivatives symbolically. Partial
derivatives are returned as small templates so that the expression layer can
turn them into DAGs without this module depending on it:

    ("const", c)                    a constant
    ("arg", i)                      the i-th argument of the differentiated call
    ("call", name, params, (t...))  another registered function

A derivative is a list of ``(weight, delta)`` template pairs, ``delta`` being
``None`` for an ordinary term or a template ``u`` standing for the Dirac mass
``delta(u)`` which multiplies the weight.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from tensor_programs.errors import ProgramError

log = logging.getLogger(__name__)

ACTIVATIONS = ("id", "relu", "abs", "sign", "step", "tanh", "erf", "quadratic", "soft_threshold")


@dataclass(frozen=True)
class NonlinRef:
    name: str
    params: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __str__(self):
        if not self.params:
            return self.name
        rendered = ", ".join(format(p, ".17g") for p in self.params)
        return f"{self.name}[{rendered}]"


@dataclass(frozen=True)
class Nonlinearity:
    """
    A registered function.

    ``arity`` and ``nparams`` are ``None`` for variadic entries, in which case
    the number of parameters must match the number of arguments.
    """

    name: str
    forward: Callable[..., np.ndarray]
    arity: Optional[int] = 1
    nparams: Optional[int] = 0
    partials: Optional[Callable] = None
    derivative: Optional[str] = None
    second_derivative_closed_form: Optional[str] = None
    is_odd: Optional[bool] = None
    polynomial_bound_degree: int = 1
    validator: Optional[Callable[[NonlinRef, int], Optional[str]]] = None

    def __call__(self, params, *args):
        return self.forward(tuple(params), *args)

    def check(self, ref: NonlinRef, nargs: int) -> Optional[str]:
        if self.validator is not None:
            return self.validator(ref, nargs)
        if nargs == 0:
            return f"'{ref}' needs at least one argument"
        if self.arity is not None and nargs != self.arity:
            return f"'{self.name}' takes {self.arity} argument(s), got {nargs}"
        expected = nargs if self.nparams is None else self.nparams
        if len(ref.params) != expected:
            return f"'{self.name}' takes {expected} parameter(s), got {len(ref.params)}"
        return None


_REGISTRY: Dict[str, Nonlinearity] = {}


def register(nonlinearity: Nonlinearity, replace: bool = False) -> Nonlinearity:
    if nonlinearity.name in _REGISTRY and not replace:
        raise ProgramError(f"nonlinearity '{nonlinearity.name}' is already registered")
    _REGISTRY[nonlinearity.name] = nonlinearity
    return nonlinearity


def get_nonlinearity(name: str) -> Nonlinearity:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ProgramError(f"unknown nonlinearity '{name}'") from None


def registered_names() -> List[str]:
    return sorted(_REGISTRY)


def apply_nonlinearity(ref: NonlinRef, *args) -> np.ndarray:
    return get_nonlinearity(ref.name)(ref.params, *args)


def check_reference(ref: NonlinRef, nargs: int) -> Optional[str]:
    if ref.name not in _REGISTRY:
        return f"unknown nonlinearity '{ref.name}'"
    return _REGISTRY[ref.name].check(ref, nargs)


def partial_templates(ref: NonlinRef, index: int, nargs: int) -> Optional[list]:
    """
    Templates for the partial derivative of ``ref`` in argument ``index``, or
    ``None`` when the registry has no closed form for it.
    """
    nonlinearity = get_nonlinearity(ref.name)
    if nonlinearity.partials is None:
        return None
    return nonlinearity.partials(ref.params, index, nargs)


def _arg(i: int = 0):
    return ("arg", i)


def _const(value: float):
    return ("const", float(value))


def _call(name: str, *children, params: Sequence[float] = ()):
    return ("call", name, tuple(float(p) for p in params), tuple(children))


# forward implementations, all take the parameter tuple first


def _identity(p, x):
    return np.asarray(x, dtype=float)


def _ones(p, x):
    return np.ones_like(np.asarray(x, dtype=float))


def _relu(p, x):
    return np.maximum(x, 0.0)


def _abs(p, x):
    return np.abs(x)


def _sign(p, x):
    return np.sign(x).astype(float)


def _step(p, x):
    return (np.asarray(x) > 0).astype(float)


def _tanh(p, x):
    return np.tanh(x)


def _tanh_prime(p, x):
    return 1.0 - np.tanh(x) ** 2


def _tanh_second(p, x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _erf(p, x):
    return special.erf(x)


def _erf_prime(p, x):
    return 2.0 / math.sqrt(math.pi) * np.exp(-np.square(x))


def _erf_second(p, x):
    return -2.0 * np.asarray(x) * _erf_prime(p, x)


def _quadratic(p, x):
    return 0.5 * np.square(x)


def _soft_threshold(p, x):
    return np.sign(x) * np.maximum(np.abs(x) - p[0], 0.0)


def _soft_threshold_prime(p, x):
    return (np.abs(x) > p[0]).astype(float)


def _shift(p, x):
    return np.asarray(x, dtype=float) + p[0]


def _lincomb(p, *xs):
    return sum(c * np.asarray(x, dtype=float) for c, x in zip(p, xs))


def _mul(p, *xs):
    result = np.asarray(xs[0], dtype=float)
    for x in xs[1:]:
        result = result * x
    return result


def _unary(templates: Callable[[Tuple[float, ...]], list]):
    def partials(params, index, nargs):
        return templates(params)

    return partials


def _backward(first, second):
    # act_bwd(g, v) = act'(g) * v
    def partials(params, index, nargs):
        if index == 1:
            return first(params)
        if second is None:
            return None
        return [(_call("mul", weight, _arg(1)), delta) for weight, delta in second(params)]

    return partials


def _register_activation(
    name,
    forward,
    first,
    prime=None,
    second=None,
    nparams=0,
    is_odd=None,
    degree=1,
    second_name=None,
):
    register(
        Nonlinearity(
            name,
            forward,
            nparams=nparams,
            partials=_unary(first),
            derivative=f"{name}_prime" if prime is not None else None,
            second_derivative_closed_form=second_name,
            is_odd=is_odd,
            polynomial_bound_degree=degree,
        )
    )
    if prime is None:
        return
    register(
        Nonlinearity(
            f"{name}_prime",
            prime,
            nparams=nparams,
            partials=_unary(second) if second is not None else None,
            is_odd=False if is_odd else None,
            polynomial_bound_degree=max(degree - 1, 0),
        )
    )

    def backward(p, g, v, _prime=prime):
        return _prime(p, g) * np.asarray(v, dtype=float)

    register(
        Nonlinearity(
            f"{name}_bwd",
            backward,
            arity=2,
            nparams=nparams,
            partials=_backward(first, second),
            polynomial_bound_degree=degree,
        )
    )


def _batchnorm(activation: str):
    def forward(p, *zs):
        index = int(p[0]) - 1
        stacked = np.stack([np.asarray(z, dtype=float) for z in zs])
        centered = stacked - stacked.mean(axis=0)
        scale = np.sqrt(np.mean(centered**2, axis=0))
        # a batch with no spread normalizes to zero
        safe = np.where(scale > 0, scale, 1.0)
        normalized = np.where(scale > 0, centered[index] / safe, 0.0)
        return get_nonlinearity(activation)((), normalized)

    return forward


def _batchnorm_validator(ref, nargs):
    if len(ref.params) != 1:
        return f"'{ref.name}' takes 1 parameter, got {len(ref.params)}"
    if nargs < 2:
        return f"'{ref.name}' needs a batch of at least 2 arguments"
    index = ref.params[0]
    if index != int(index) or not 1 <= index <= nargs:
        return f"'{ref.name}' index must be an integer in 1..{nargs}"
    return None


def _batchnorm_entry(name):
    base = get_nonlinearity(name)
    return Nonlinearity(
        f"batchnorm_{name}",
        _batchnorm(name),
        arity=None,
        nparams=1,
        polynomial_bound_degree=base.polynomial_bound_degree,
        validator=_batchnorm_validator,
    )


_register_activation(
    "id",
    _identity,
    lambda p: [(_const(1.0), None)],
    prime=_ones,
    second=lambda p: [],
    is_odd=True,
    second_name="zero",
)
_register_activation(
    "relu",
    _relu,
    lambda p: [(_call("step", _arg()), None)],
    prime=_step,
    second=lambda p: [(_const(1.0), _arg())],
    is_odd=False,
    second_name="delta",
)
_register_activation(
    "abs",
    _abs,
    lambda p: [(_call("sign", _arg()), None)],
    prime=_sign,
    second=lambda p: [(_const(2.0), _arg())],
    is_odd=False,
    second_name="delta",
)
_register_activation("sign", _sign, lambda p: [(_const(2.0), _arg())], is_odd=True, degree=0)
_register_activation("step", _step, lambda p: [(_const(1.0), _arg())], is_odd=False, degree=0)
register(Nonlinearity("tanh_second", _tanh_second, is_odd=True, polynomial_bound_degree=0))
_register_activation(
    "tanh",
    _tanh,
    lambda p: [(_call("tanh_prime", _arg()), None)],
    prime=_tanh_prime,
    second=lambda p: [(_call("tanh_second", _arg()), None)],
    is_odd=True,
    degree=0,
    second_name="tanh_second",
)
register(Nonlinearity("erf_second", _erf_second, is_odd=True, polynomial_bound_degree=0))
_register_activation(
    "erf",
    _erf,
    lambda p: [(_call("erf_prime", _arg()), None)],
    prime=_erf_prime,
    second=lambda p: [(_call("erf_second", _arg()), None)],
    is_odd=True,
    degree=0,
    second_name="erf_second",
)
_register_activation(
    "quadratic",
    _quadratic,
    lambda p: [(_arg(), None)],
    prime=_identity,
    second=lambda p: [(_const(1.0), None)],
    is_odd=False,
    degree=2,
    second_name="one",
)
_register_activation(
    "soft_threshold",
    _soft_threshold,
    lambda p: [(_call("soft_threshold_prime", _arg(), params=p), None)],
    prime=_soft_threshold_prime,
    second=lambda p: [
        (_const(1.0), _call("shift", _arg(), params=(-p[0],))),
        (_const(-1.0), _call("shift", _arg(), params=(p[0],))),
    ],
    nparams=1,
    is_odd=True,
    second_name="delta",
)
register(
    Nonlinearity(
        "shift",
        _shift,
        nparams=1,
        partials=lambda p, i, n: [(_const(1.0), None)],
    )
)
register(
    Nonlinearity(
        "lincomb",
        _lincomb,
        arity=None,
        nparams=None,
        partials=lambda p, i, n: [(_const(p[i]), None)],
        is_odd=True,
    )
)
register(
    Nonlinearity(
        "mul",
        _mul,
        arity=None,
        partials=lambda p, i, n: [
            (_call("mul", *[_arg(j) for j in range(n) if j != i]) if n > 1 else _const(1.0), None)
        ],
        polynomial_bound_degree=2,
    )
)
for _name in ACTIVATIONS:
    if _name != "soft_threshold":
        register(_batchnorm_entry(_name))
