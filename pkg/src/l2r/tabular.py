"""Plain-text data files: '#' metadata lines, a header row, comma-separated values.

Floats are written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMATS = ("csv", "jsonl")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f"{f:.17g}"
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else format_value(f)
    return v


def render_table(columns: Sequence[str], rows: Iterable[Sequence], meta: dict[str, str] | None = None,
                 fmt: str = "csv") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    meta = meta or {}
    buf = io.StringIO()
    if fmt == "csv":
        for key, value in meta.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} values for {len(columns)} columns")
            writer.writerow([format_value(v) for v in row])
    else:
        buf.write(json.dumps({"_meta": meta, "_columns": list(columns)}, sort_keys=True) + "\n")
        for row in rows:
            buf.write(json.dumps({c: _json_value(v) for c, v in zip(columns, row)}) + "\n")
    return buf.getvalue()


def write_table(path: Path, columns: Sequence[str], rows: Iterable[Sequence], meta: dict[str, str] | None = None,
                fmt: str = "csv") -> Path:
    path = Path(path)
    path.write_text(render_table(columns, rows, meta, fmt), encoding="utf-8")
    return path


def read_csv_table(path: Path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Inverse of the csv flavour of :func:`write_table` (values stay strings)."""
    meta: dict[str, str] = {}
    body = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition(": ")
            meta[key] = value
        else:
            body.append(line)
    reader = list(csv.reader(body))
    return meta, reader[0], reader[1:]
