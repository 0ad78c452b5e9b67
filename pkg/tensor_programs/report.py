"""
JSON and CSV reports.

A report is a mapping with the keys ``program``, ``spec``, ``rows``,
``diagnostics`` and ``versions``. Its layout is checked with the same config
option machinery as the run settings.
"""
import csv
import json
import logging
import math
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

import numpy as np
import scipy
from mkdocs.config.base import ValidationError
from mkdocs.config.config_options import Type

from tensor_programs import __version__
from tensor_programs.config import SchemaConfig

log = logging.getLogger(__name__)

ROW_FIELDS = ("quantity", "width", "empirical", "stderr", "theory", "abs_err", "rel_err", "route")


def _finite(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


@dataclass(frozen=True)
class ReportRow:
    quantity: str
    width: Optional[int] = None
    empirical: Optional[float] = None
    stderr: Optional[float] = None
    theory: Optional[float] = None
    route: Optional[str] = None

    @property
    def abs_err(self) -> Optional[float]:
        if self.empirical is None or self.theory is None:
            return None
        return abs(self.empirical - self.theory)

    @property
    def rel_err(self) -> Optional[float]:
        error = self.abs_err
        if error is None or self.theory == 0:
            return None
        return error / abs(self.theory)

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "width": None if self.width is None else int(self.width),
            "empirical": _finite(self.empirical),
            "stderr": _finite(self.stderr),
            "theory": _finite(self.theory),
            "abs_err": _finite(self.abs_err),
            "rel_err": _finite(self.rel_err),
            "route": self.route,
        }


def versions() -> dict:
    return {
        "tensor_programs": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def build_report(
    rows: Iterable[ReportRow],
    program: str = "",
    spec: Optional[Mapping] = None,
    diagnostics: Sequence[str] = (),
) -> dict:
    return {
        "program": program,
        "spec": dict(spec or {}),
        "rows": [row.to_dict() for row in rows],
        "diagnostics": list(diagnostics),
        "versions": versions(),
    }


def _jsonable(value):
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return _finite(value)
    return value


def dumps(report: Mapping) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def write_report(report: Mapping, path=None) -> str:
    """
    Serialized report, also written to ``path`` when given.
    """
    text = dumps(report)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
        log.info(f"report written to {path}")
    return text


def write_csv(rows: Iterable[Mapping], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(stream, fieldnames=ROW_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row.get(key) is None else row[key] for key in ROW_FIELDS})
    log.info(f"rows written to {path}")


def read_csv(path) -> List[dict]:
    """
    Rows of a CSV report converted back to the types of the JSON rows.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as stream:
        for raw in csv.DictReader(stream):
            row = {}
            for key in ROW_FIELDS:
                value = raw.get(key, "")
                if value == "":
                    row[key] = None
                elif key in ("quantity", "route"):
                    row[key] = value
                elif key == "width":
                    row[key] = int(value)
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows


class Rows(Type):
    """
    Rows Config Option

    Validate the ``rows`` list of a report.
    """

    def __init__(self, **kwargs):
        super().__init__(list, **kwargs)

    def run_validation(self, value):
        value = super().run_validation(value)
        for i, row in enumerate(value):
            if not isinstance(row, dict):
                raise ValidationError(f"row {i} must be a mapping, received '{row}'.")
            missing = [key for key in ROW_FIELDS if key not in row]
            if missing:
                raise ValidationError(f"row {i} misses {', '.join(missing)}.")
            if not isinstance(row["quantity"], str):
                raise ValidationError(f"row {i}: quantity must be a string.")
            if row["width"] is not None and (isinstance(row["width"], bool) or not isinstance(row["width"], int)):
                raise ValidationError(f"row {i}: width must be an integer or null.")
            for key in ("empirical", "stderr", "theory", "abs_err", "rel_err"):
                entry = row[key]
                if entry is not None and (isinstance(entry, bool) or not isinstance(entry, (int, float))):
                    raise ValidationError(f"row {i}: {key} must be a number or null.")
            if row["route"] is not None and not isinstance(row["route"], str):
                raise ValidationError(f"row {i}: route must be a string or null.")
        return value


report_scheme = (
    ("program", Type(str, required=True)),
    ("spec", Type(dict, required=True)),
    ("rows", Rows(required=True)),
    ("diagnostics", Type(list, required=True)),
    ("versions", Type(dict, required=True)),
)


def validate_report(report: Mapping) -> List[str]:
    """
    Problems with the layout of a (deserialized) report, empty when valid.
    """
    config = SchemaConfig(schema=report_scheme)
    config.load_dict(dict(report))
    failed, warnings = config.validate()
    problems = [f"'{key}': {error}" for key, error in failed]
    problems.extend(f"'{key}': {warning}" for key, warning in warnings)
    return problems
