"""
Ready-made comparisons of simulated networks and random matrices with their
limits, one per ``tp demo`` name. Every demo returns a report mapping.
"""
import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from tensor_programs import kernels
from tensor_programs.amp import AmpConfig, amp_study
from tensor_programs.architectures import ArchSpec, build_program, program_text
from tensor_programs.config import Settings
from tensor_programs.errors import ProgramError
from tensor_programs.limits import compute_limits_no_transpose, limit_moment
from tensor_programs.program import parse_expression
from tensor_programs.report import ReportRow, build_report
from tensor_programs.simulator import convergence_study
from tensor_programs.spectra import goe_program, marchenko_pastur_study, semicircle_study, wishart_program

log = logging.getLogger(__name__)

# two generic inputs of dimension 4
INPUTS = ((1.0, 0.5, -0.3, 0.8), (-0.2, 1.1, 0.4, 0.6))


def _measures(sk):
    return [(name, parse_expression(sk, text)) for name, text in sk.measures]


def _simulate(a: ArchSpec, settings: Settings, width: int, routes=("auto",)):
    sk, cdc, spec = build_program(a, settings.psd_tol)
    report = convergence_study(
        sk,
        cdc,
        spec,
        _measures(sk),
        [width],
        trials=settings.trials,
        seed=settings.seed,
        coupled=settings.coupled,
        workers=settings.threads,
        routes=routes,
        width_cap=settings.width_cap,
        method=settings.expectation_method(),
        rcond=settings.pinv_rcond,
    )
    return report.rows


def _closed_form(rows: List[ReportRow], prefix: str, matrix: np.ndarray) -> List[ReportRow]:
    # closed-form values next to the simulated entries ``{prefix}_{i}_{j}``
    out = []
    for row in rows:
        if not row.quantity.startswith(prefix + "_"):
            continue
        i, j = (int(p) - 1 for p in row.quantity[len(prefix) + 1 :].split("_"))
        out.append(ReportRow(row.quantity, row.width, row.empirical, row.stderr, float(matrix[i, j]), "closed_form"))
    return out


def _kernel_rows(name: str, estimate: kernels.KernelEstimate, theory: np.ndarray) -> List[ReportRow]:
    rows = []
    for i in range(theory.shape[0]):
        for j in range(i, theory.shape[0]):
            rows.append(
                ReportRow(
                    f"{name}_{i + 1}_{j + 1}",
                    estimate.width,
                    float(estimate.mean[i, j]),
                    float(estimate.stderr[i, j]),
                    float(theory[i, j]),
                    "closed_form",
                )
            )
    return rows


def mlp_gp(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    a = ArchSpec("mlp", depth=k or 3, activation="tanh", inputs=INPUTS, sigma_w=1.5, sigma_b=0.1)
    rows = _simulate(a, settings, n or 8192)
    sigma = kernels.mlp_sigma(a, settings.expectation_method())[-1]
    return program_text(a), a, rows + _closed_form(rows, "gp", sigma)


def mlp_ntk(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    a = ArchSpec("mlp", depth=k or 2, activation="tanh", inputs=INPUTS, sigma_w=1.5, sigma_b=0.1)
    theory = kernels.mlp_ntk(a, settings.expectation_method())
    estimate = kernels.empirical_mlp_ntk(a, n or 2048, draws=max(settings.trials, 20), seed=settings.seed)
    return program_text(a), a, _kernel_rows("ntk", estimate, theory)


def ntk_gmp(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    a = ArchSpec("mlp", depth=k or 2, activation="tanh", inputs=INPUTS, sigma_w=1.5, sigma_b=0.1, readout="gmp")
    theory = kernels.mlp_ntk_gmp(a, settings.expectation_method())
    estimate = kernels.empirical_gmp_ntk(a, n or 4096, draws=max(settings.trials, 20), seed=settings.seed)
    return program_text(a), a, _kernel_rows("gmp_ntk", estimate, theory)


def semicircle(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    k = k or 6
    rows = semicircle_study(
        k, n or 4096, settings.trials, settings.seed, settings.coupled, settings.threads, settings.expectation_method()
    )
    return goe_program(k), {"k": k}, rows


def marchenko_pastur(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    k = k or 6
    rows = []
    for alpha in (0.5, 1.0, 2.0):
        for row in marchenko_pastur_study(
            k,
            alpha,
            n or 4096,
            settings.trials,
            settings.seed,
            settings.coupled,
            settings.threads,
            settings.expectation_method(),
        ):
            quantity = f"{row.quantity}[alpha={alpha:g}]"
            rows.append(ReportRow(quantity, row.width, row.empirical, row.stderr, row.theory, row.route))
    # one program per ratio
    programs = {f"{alpha:g}": wishart_program(k, alpha) for alpha in (0.5, 1.0, 2.0)}
    return "", {"k": k, "alpha": [0.5, 1.0, 2.0], "programs": programs}, rows


def signal_prop(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    a = ArchSpec("mlp_backward", depth=k or 3, activation="tanh", inputs=INPUTS, sigma_w=1.5, sigma_b=0.1)
    rows = _simulate(a, settings, n or 4096)
    prop = kernels.signal_prop(a, method=settings.expectation_method())
    extra = []
    for layer, pi in enumerate(prop.pi, 1):
        extra.extend(_closed_form(rows, f"pi{layer}", pi))
    return program_text(a), a, rows + extra


def cnn(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    images = (
        (1.0, -0.5, 0.3, 0.8, -1.2, 0.4),
        (0.2, 0.9, -0.7, 0.5, 1.0, -0.3),
    )
    a = ArchSpec("cnn1d_circular", depth=k or 2, activation="relu", inputs=images, sigma_w=1.4, sigma_b=0.2, pixels=3)
    method = settings.expectation_method()
    rows = _simulate(a, settings, n or 2048)
    rows += _closed_form(rows, "gp", kernels.cnn_gp(a, method))
    estimate = kernels.empirical_cnn_ntk(a, n or 1024, draws=max(settings.trials, 20), seed=settings.seed)
    rows += _kernel_rows("ntk", estimate, kernels.cnn_ntk(a, method))
    return program_text(a), a, rows


def rnn(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    """
    Weight-tied recurrent network simulated against the limits of its
    untied twin, which must agree.
    """
    steps = k or 3
    inputs = tuple(tuple(np.tile(x, steps)) for x in INPUTS)
    tied = ArchSpec("simple_rnn", depth=steps, activation="tanh", inputs=inputs, sigma_w=1.2, sigma_b=0.1)
    untied = ArchSpec("simple_rnn", depth=steps, activation="tanh", inputs=inputs, sigma_w=1.2, sigma_b=0.1, tied=False)
    method = settings.expectation_method()
    rows = _simulate(tied, settings, n or 4096)
    sk, cdc, spec = build_program(untied, settings.psd_tol)
    table, _ = compute_limits_no_transpose(sk, cdc, spec, method, settings.pinv_rcond)
    extra = []
    for name, phi in _measures(sk):
        value = limit_moment(table, None, phi, method)
        for row in rows:
            if row.quantity == name:
                extra.append(ReportRow(name, row.width, row.empirical, row.stderr, value, "untied"))
    return program_text(tied), tied, rows + extra


def amp(settings: Settings, n: Optional[int] = None, k: Optional[int] = None):
    cfg = AmpConfig(N=n or 4000, steps=k or 10, seed=settings.seed)
    rows = amp_study(cfg, max(settings.trials, 2), settings.threads, settings.expectation_method())
    return "", cfg, rows


DEMOS: Dict[str, Callable[..., Tuple[str, object, List[ReportRow]]]] = {
    "mlp-gp": mlp_gp,
    "mlp-ntk": mlp_ntk,
    "ntk-gmp": ntk_gmp,
    "semicircle": semicircle,
    "marchenko-pastur": marchenko_pastur,
    "signal-prop": signal_prop,
    "cnn": cnn,
    "rnn": rnn,
    "amp": amp,
}


def _describe(setup) -> dict:
    if isinstance(setup, dict):
        return dict(setup)
    return {key: getattr(setup, key) for key in setup.__dataclass_fields__}


def run_demo(name: str, settings: Settings, n: Optional[int] = None, k: Optional[int] = None) -> dict:
    try:
        demo = DEMOS[name]
    except KeyError:
        raise ProgramError(f"unknown demo '{name}', expected one of {', '.join(DEMOS)}") from None
    log.info(f"running demo '{name}'")
    program, setup, rows = demo(settings, n, k)
    spec = {"demo": name, "setup": _describe(setup), "settings": settings.to_dict()}
    return build_report(rows, program, spec)
