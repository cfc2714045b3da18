"""Tabular reports with deterministic CSV/JSON serialization."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

FORMATS = ("csv", "json")


@dataclass
class Report:
    columns: tuple
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        for row in self.rows:
            self._check(row)

    def _check(self, row: dict) -> None:
        extra = set(row) - set(self.columns)
        if extra:
            raise ValueError(f"row has keys outside the schema: {sorted(extra)}")

    def add(self, **row) -> None:
        self._check(row)
        self.rows.append({c: row.get(c) for c in self.columns})

    def column(self, name: str) -> list:
        return [row.get(name) for row in self.rows]

    def where(self, **match) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Report):
            return NotImplemented
        norm = lambda rows: [{c: r.get(c) for c in self.columns} for r in rows]
        return self.columns == other.columns and norm(self.rows) == norm(other.rows)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_cell(v) for v in value)
    return str(value)


def _parse(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if hasattr(value, "item"):  # numpy scalars
        return _json_safe(value.item())
    return value


def dumps_report(report: Report, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(report.columns)
        for row in report.rows:
            writer.writerow([_cell(_json_safe(row.get(c))) for c in report.columns])
        return buf.getvalue()
    if fmt == "json":
        doc = {"columns": list(report.columns),
               "rows": [{c: _json_safe(row.get(c)) for c in report.columns} for row in report.rows],
               "meta": _json_safe(report.meta)}
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")


def loads_report(text: str, fmt: str = "csv") -> Report:
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        return Report(tuple(header), [dict(zip(header, map(_parse, line))) for line in reader])
    if fmt == "json":
        doc = json.loads(text)
        return Report(tuple(doc["columns"]), doc["rows"], doc.get("meta", {}))
    raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")


def _fmt_for(path: Path, fmt: str | None) -> str:
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ValueError(f"cannot infer report format from {path}; pass one of {FORMATS}")
    return fmt


def export_report(report: Report, path, fmt: str | None = None) -> Path:
    """Write ``report`` as UTF-8 with "\\n" newlines; field order follows ``report.columns``."""
    path = Path(path)
    fmt = _fmt_for(path, fmt)
    text = dumps_report(report, fmt)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path


def load_report(path, fmt: str | None = None) -> Report:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_report(fh.read(), _fmt_for(path, fmt))
