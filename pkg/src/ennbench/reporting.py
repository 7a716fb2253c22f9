"""Metric persistence: fixed-schema CSVs plus a human-readable summary.

The column order is frozen so two runs with the same seeds produce
byte-identical files; rows are sorted on a stable key before writing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ("model", "model_size_params", "dataset", "corruption_type", "severity",
           "metric", "value", "temperature", "seed")


@dataclass
class MetricRecord:
    """One measured number with enough provenance to recompute it."""

    model: str
    model_size_params: int
    dataset: str
    metric: str
    value: float | None
    corruption_type: str = ""
    severity: int | None = None
    temperature: float = 1.0
    seed: int = 0

    def row(self):
        return (
            self.model,
            str(self.model_size_params),
            self.dataset,
            self.corruption_type,
            "" if self.severity is None else str(self.severity),
            self.metric,
            "" if self.value is None else repr(float(self.value)),
            repr(float(self.temperature)),
            str(self.seed),
        )


@dataclass
class MetricsReport:
    """An ordered collection of metric records plus run-level metadata."""

    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, **kwargs) -> None:
        self.records.append(MetricRecord(**kwargs))

    def sorted_records(self):
        return sorted(self.records, key=lambda r: (
            r.model, r.dataset, r.corruption_type,
            -1 if r.severity is None else r.severity, r.metric, r.temperature,
        ))

    def values(self, **filters) -> list:
        out = []
        for r in self.records:
            if all(getattr(r, k) == v for k, v in filters.items()):
                out.append(r.value)
        return out

    def value(self, **filters):
        vals = self.values(**filters)
        if len(vals) != 1:
            raise KeyError(f"expected one record for {filters}, found {len(vals)}")
        return vals[0]


def render_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for record in report.sorted_records():
        writer.writerow(record.row())
    return buf.getvalue()


def _fmt(value, width=12):
    if value is None:
        return " " * (width - 1) + "-"
    return f"{value:>{width}.4f}"


def render_summary(report: MetricsReport) -> str:
    """Per-model table of headline numbers (clean test + grid averages)."""
    models = sorted({r.model for r in report.records})
    lines = []
    title = report.metadata.get("title", "evaluation summary")
    lines.append(title)
    lines.append("=" * len(title))
    note = report.metadata.get("note")
    if note:
        lines.append(note)
    lines.append("")
    header = (f"{'model':<16}{'params':>9}" + "".join(
        f"{name:>13}" for name in
        ("acc", "ece", "nll", "joint_nll", "mce", "aupr", "confidence", "fail>95%")))
    lines.append(header)
    lines.append("-" * len(header))
    for model in models:
        def get(metric, dataset="test"):
            vals = report.values(model=model, dataset=dataset, metric=metric)
            return vals[0] if vals else None

        params = ""
        for r in report.records:
            if r.model == model:
                params = str(r.model_size_params)
                break
        row = f"{model:<16}{params:>9}"
        for metric, dataset in (("accuracy", "test"), ("ece", "test"),
                                ("marginal_nll", "test"), ("joint_nll", "test"),
                                ("mce", "corruption-grid"), ("aupr", "ood"),
                                ("confidence", "test"), ("failure_rate", "test")):
            vals = report.values(model=model, dataset=dataset, metric=metric)
            row += _fmt(vals[0] if vals else None, 13)
        lines.append(row)
    lines.append("")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir, *, name: str = "metrics"):
    """Write ``<name>.csv`` and ``<name>_summary.txt``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    csv_path.write_text(render_csv(report))
    summary_path = out_dir / f"{name}_summary.txt"
    summary_path.write_text(render_summary(report))
    return csv_path, summary_path
