"""Serialization helpers shared by the CLI and the report writers.

Numbers pass through a 12-significant-digit canonicalization before
either JSON or CSV encoding, so both formats carry identical values.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from typing import Any

from . import __version__

SIG_DIGITS = 12


def fmt12(v: float) -> float:
    """Round-trip a float through 12 significant digits."""
    return float(f"{float(v):.{SIG_DIGITS}g}")


def canon(obj: Any) -> Any:
    """Recursively canonicalize floats inside plain containers."""
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return fmt12(obj)
    if isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, dict):
        return {k: canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canon(v) for v in obj]
    # numpy scalars and arrays
    if hasattr(obj, "tolist"):
        return canon(obj.tolist())
    return obj


def payload(command: str, config: dict, rows: list[dict]) -> dict:
    return {
        "artifact": {"name": "kinkqr", "version": __version__},
        "command": command,
        "config": canon(config),
        "rows": canon(rows),
    }


def _cell(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.{SIG_DIGITS}g}"
    if v is None:
        return ""
    return str(v)


def render_csv(doc: dict) -> str:
    """CSV rendering: provenance comment lines, then the row table."""
    buf = io.StringIO()
    buf.write(f"# kinkqr {doc['artifact']['version']}\n")
    buf.write(f"# command: {doc['command']}\n")
    buf.write("# config: " + json.dumps(doc["config"], sort_keys=True) + "\n")
    rows = doc["rows"]
    cols: list[str] = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def render_json(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def write_document(doc: dict, fmt: str, output: str | None) -> None:
    text = render_csv(doc) if fmt == "csv" else render_json(doc)
    if output is None:
        sys.stdout.write(text)
    else:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)


def write_rows_csv(path: str, rows: list[dict], preamble: list[str] | None = None) -> None:
    """Plain CSV artifact (curves, traces, bootstrap stats)."""
    cols: list[str] = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in preamble or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_cell(r.get(c)) for c in cols])
