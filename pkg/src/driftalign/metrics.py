"""Run traces and their delimited on-disk form.

Three CSVs per run, written with fixed headers, fixed column order, '.'
decimal separator, '\\n' line endings and floats at 6 significant digits,
so identical runs produce byte-identical files on any platform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field


class CsvFormatError(ValueError):
    pass


BATCH_HEADER = [
    "batch_index",
    "domain_id",
    "n_samples",
    "n_correct",
    "l_da",
    "l_em",
    "l_final",
    "n_confident",
    "shift_detected",
]
DOMAIN_HEADER = [
    "domain_id",
    "kind",
    "severity",
    "n_batches",
    "n_samples",
    "n_correct",
    "error_rate",
]
SUMMARY_HEADER = [
    "variant",
    "ordering",
    "n_domains",
    "n_batches",
    "n_samples",
    "n_correct",
    "error_rate",
    "mean_l_da",
    "n_shifts",
]


@dataclass
class BatchRow:
    batch_index: int
    domain_id: int
    n_samples: int
    n_correct: int
    l_da: float
    l_em: float
    l_final: float
    n_confident: int
    shift_detected: int


@dataclass
class MetricsTrace:
    variant: str
    ordering: str
    domains: list  # [(kind, severity), ...]
    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def n_samples(self):
        return sum(r.n_samples for r in self.rows)

    def n_correct(self):
        return sum(r.n_correct for r in self.rows)

    def error_percent(self):
        n = self.n_samples()
        if n == 0:
            return 0.0
        return 100.0 * (1.0 - self.n_correct() / n)

    def domain_error_percent(self, domain_id):
        rows = [r for r in self.rows if r.domain_id == domain_id]
        n = sum(r.n_samples for r in rows)
        if n == 0:
            return 0.0
        return 100.0 * (1.0 - sum(r.n_correct for r in rows) / n)

    def mean_l_da(self):
        if not self.rows:
            return 0.0
        return sum(r.l_da for r in self.rows) / len(self.rows)

    def n_shifts(self):
        return sum(r.shift_detected for r in self.rows)


def fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        cells = [fmt(v) for v in row]
        if any("," in c or "\n" in c for c in cells):
            raise CsvFormatError(f"{path}: cell containing delimiter in row {row!r}")
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_trace(trace, out_dir):
    """Write batches.csv, domains.csv and summary.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    batch_path = os.path.join(out_dir, "batches.csv")
    _write_csv(
        batch_path,
        BATCH_HEADER,
        [
            (
                r.batch_index,
                r.domain_id,
                r.n_samples,
                r.n_correct,
                r.l_da,
                r.l_em,
                r.l_final,
                r.n_confident,
                r.shift_detected,
            )
            for r in trace.rows
        ],
    )

    domain_rows = []
    for domain_id, (kind, severity) in enumerate(trace.domains):
        rows = [r for r in trace.rows if r.domain_id == domain_id]
        domain_rows.append(
            (
                domain_id,
                kind,
                severity,
                len(rows),
                sum(r.n_samples for r in rows),
                sum(r.n_correct for r in rows),
                trace.domain_error_percent(domain_id),
            )
        )
    domain_path = os.path.join(out_dir, "domains.csv")
    _write_csv(domain_path, DOMAIN_HEADER, domain_rows)

    summary_path = os.path.join(out_dir, "summary.csv")
    _write_csv(
        summary_path,
        SUMMARY_HEADER,
        [
            (
                trace.variant,
                trace.ordering,
                len(trace.domains),
                len(trace.rows),
                trace.n_samples(),
                trace.n_correct(),
                trace.error_percent(),
                trace.mean_l_da(),
                trace.n_shifts(),
            )
        ],
    )
    return [batch_path, domain_path, summary_path]


def read_csv(path, expected_header):
    """Parse one of our CSVs back; malformed input names the file and line."""
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise CsvFormatError(f"{path}: file not found") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CsvFormatError(f"{path}:1: empty file")
    header = lines[0].split(",")
    if header != expected_header:
        raise CsvFormatError(
            f"{path}:1: header mismatch, expected {','.join(expected_header)!r}, got {lines[0]!r}"
        )
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(expected_header):
            raise CsvFormatError(
                f"{path}:{lineno}: expected {len(expected_header)} columns, got {len(cells)}"
            )
        rows.append(dict(zip(expected_header, cells)))
    return rows


def parse_number(path, lineno, name, text, kind):
    try:
        return kind(text)
    except ValueError:
        raise CsvFormatError(
            f"{path}:{lineno}: column {name!r} is not a {kind.__name__}: {text!r}"
        ) from None


def read_summary(run_dir):
    path = os.path.join(run_dir, "summary.csv")
    rows = read_csv(path, SUMMARY_HEADER)
    if len(rows) != 1:
        raise CsvFormatError(f"{path}:2: expected exactly one summary row, got {len(rows)}")
    row = rows[0]
    for name, kind in (
        ("n_domains", int),
        ("n_batches", int),
        ("n_samples", int),
        ("n_correct", int),
        ("error_rate", float),
        ("mean_l_da", float),
        ("n_shifts", int),
    ):
        row[name] = parse_number(path, 2, name, row[name], kind)
    return row


def read_domains(run_dir):
    path = os.path.join(run_dir, "domains.csv")
    rows = read_csv(path, DOMAIN_HEADER)
    for lineno, row in enumerate(rows, start=2):
        for name, kind in (
            ("domain_id", int),
            ("severity", int),
            ("n_batches", int),
            ("n_samples", int),
            ("n_correct", int),
            ("error_rate", float),
        ):
            row[name] = parse_number(path, lineno, name, row[name], kind)
    return rows


def read_batches(run_dir):
    path = os.path.join(run_dir, "batches.csv")
    rows = read_csv(path, BATCH_HEADER)
    for lineno, row in enumerate(rows, start=2):
        for name, kind in (
            ("batch_index", int),
            ("domain_id", int),
            ("n_samples", int),
            ("n_correct", int),
            ("l_da", float),
            ("l_em", float),
            ("l_final", float),
            ("n_confident", int),
            ("shift_detected", int),
        ):
            row[name] = parse_number(path, lineno, name, row[name], kind)
    return rows
