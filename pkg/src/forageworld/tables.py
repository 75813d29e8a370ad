"""Columnar text tables with a '#'-prefixed metadata block."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_table(path, rows: list, columns=None, meta: dict | None = None) -> Path:
    """Write dict rows as CSV; each ``meta`` item becomes a ``# key: json`` line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
    return path


def read_table(path) -> tuple[list, dict]:
    """Inverse of :func:`write_table`; numeric-looking cells become floats."""
    meta = {}
    lines = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = json.loads(v)
        else:
            lines.append(line)
    rows = []
    for r in csv.DictReader(lines):
        out = {}
        for k, v in r.items():
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
        rows.append(out)
    return rows, meta
