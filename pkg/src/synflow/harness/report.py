"""Writing and reading reports as JSON or CSV.

JSON files carry a ``"type"`` tag (``sweep``, ``prune``, ``verify``) and
round-trip through :func:`load`.  CSV files start with a header row naming
the columns:

* sweep: ``scorer, kind, n, seed, rho, collapsed, collapsed_layers, accuracy,
  trained, failed, crashed, passes`` then ``fraction_<layer>`` per prunable layer;
  one row per (scorer, seed, rho) cell.
* prune: ``iteration, layer, remaining, total, prune_size, min_cut_size``;
  one row per (iteration, layer).
* verify: ``check, architecture, value, tolerance, passed``.

Booleans are written as 0/1 and floats with ``repr`` so values survive a
CSV round trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..pruner import PruneReport
from .experiments import SweepReport
from .verify import VerifyReport

REPORT_TYPES = {"sweep": SweepReport, "prune": PruneReport, "verify": VerifyReport}
FORMATS = ("csv", "json")


def report_type(report) -> str:
    for name, cls in REPORT_TYPES.items():
        if isinstance(report, cls):
            return name
    raise TypeError(f"cannot emit a {type(report).__name__}")


def csv_header(report) -> tuple:
    if isinstance(report, PruneReport):
        return PruneReport.CSV_COLUMNS
    return report.csv_header()


def to_json(report) -> str:
    payload = {"type": report_type(report), **report.to_dict()}
    return json.dumps(payload, indent=2) + "\n"


def to_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(report))
    for row in report.csv_rows():
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit(report, fmt: str, path) -> Path:
    """Write ``report`` to ``path``, creating parent directories and overwriting any existing file."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    text = to_json(report) if fmt == "json" else to_csv(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def load(path):
    """Read a JSON report written by :func:`emit` back into its report object."""
    with open(path) as fh:
        payload = json.load(fh)
    kind = payload.pop("type", None)
    if kind not in REPORT_TYPES:
        raise ValueError(f"{path}: unknown report type {kind!r}")
    return REPORT_TYPES[kind].from_dict(payload)


def read_csv(path) -> list[dict[str, str]]:
    """Rows of a CSV report keyed by header column."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["emit", "load", "read_csv", "to_json", "to_csv", "report_type", "REPORT_TYPES", "FORMATS"]
