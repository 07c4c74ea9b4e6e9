"""Deterministic text artifacts: versioned CSV files with a provenance header."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Mapping

SCHEMA = 1


def fmt(value) -> str:
    """Shortest round-trip text for floats; plain ``str`` otherwise."""
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):
        return fmt(value.item())
    return str(value)


def header(meta: Mapping[str, object]) -> str:
    lines = [f"# schema={SCHEMA}"]
    lines += [f"# {k}={fmt(meta[k])}" for k in sorted(meta)]
    return "\n".join(lines) + "\n"


def csv_text(columns: Iterable[str], rows: Iterable[Iterable], meta: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    buf.write(header(meta or {}))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def with_header(body: str, meta: Mapping[str, object] | None = None) -> str:
    """Prefix an already rendered CSV body with the schema and provenance header."""
    return header(meta or {}) + body


def write_artifacts(out: Path, artifacts: Mapping[str, str]) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(artifacts):
        path = out / name
        path.write_text(artifacts[name], encoding="utf-8", newline="\n")
        written.append(path)
    return written
