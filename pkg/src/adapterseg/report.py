"""Comparison tables: measured MetricReports rendered beside the shipped reference rows."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .metrics import METRIC_KEYS, TASK_METRICS, MetricReport

REFERENCE_FILE = "reference_results.json"
MEASURED = "measured"

HIGHER_IS_BETTER = {
    "s_alpha": True, "e_phi": True, "f_beta_w": True, "mae": False,
    "ber": False, "m_dice": True, "m_iou": True, "f1": True,
}
METRIC_LABELS = {
    "s_alpha": "S_alpha", "e_phi": "E_phi", "f_beta_w": "F_beta^w", "mae": "MAE",
    "ber": "BER", "m_dice": "mDice", "m_iou": "mIoU", "f1": "F1",
}
CSV_HEADER = ("provenance", "task", "method", "dataset", "metric", "value")
MISSING = "-"


def _check_keys(keys: Iterable[str]) -> None:
    unknown = set(keys) - set(METRIC_KEYS)
    if unknown:
        raise ValueError(f"unknown metric key(s): {', '.join(sorted(unknown))}")


def arrow(metric: str) -> str:
    return "↑" if HIGHER_IS_BETTER[metric] else "↓"


@dataclass(frozen=True)
class ReportRow:
    """One method on one dataset. Values are display strings; None marks a missing entry."""

    provenance: str
    task: str
    method: str
    dataset: str
    values: tuple[tuple[str, Optional[str]], ...]

    def __post_init__(self):
        _check_keys(k for k, _ in self.values)

    @classmethod
    def make(cls, provenance: str, task: str, method: str, dataset: str,
             values: Mapping[str, Optional[str]]) -> "ReportRow":
        ordered = tuple((k, values[k]) for k in METRIC_KEYS if k in values)
        _check_keys(values)
        return cls(provenance, task, method, dataset, ordered)

    @property
    def is_reference(self) -> bool:
        return self.provenance != MEASURED

    @property
    def label(self) -> str:
        return f"[{self.provenance}] reference" if self.is_reference else MEASURED

    def get(self, metric: str) -> Optional[str]:
        return dict(self.values).get(metric)


def format_value(v: float) -> str:
    return f"{v:.4f}"


def measured_row(report: MetricReport, method: Optional[str] = None) -> ReportRow:
    _check_keys(report.values)
    return ReportRow.make(MEASURED, report.task, method or report.method, report.dataset_id,
                          {k: format_value(v) for k, v in report.values.items()})


@dataclass
class ReportTable:
    rows: list[ReportRow] = field(default_factory=list)

    def tasks(self) -> list[str]:
        return list(dict.fromkeys(r.task for r in self.rows))

    def metrics(self, task: str) -> list[str]:
        present = {k for r in self.rows if r.task == task for k, _ in r.values}
        base = [k for k in TASK_METRICS.get(task, ()) if k in present]
        return base + [k for k in METRIC_KEYS if k in present and k not in base]

    def to_markdown(self, titles: Optional[Mapping[str, str]] = None,
                    names: Optional[Mapping[str, str]] = None) -> str:
        out = []
        for task in self.tasks():
            rows = [r for r in self.rows if r.task == task]
            metrics = self.metrics(task)
            datasets = list(dict.fromkeys(r.dataset for r in rows))
            title = (titles or {}).get(task, task)
            out.append(f"### {title}\n")
            names = names or {}
            cols = [f"{names.get(d, d)} {METRIC_LABELS[m]} {arrow(m)}" for d in datasets for m in metrics]
            out.append("| Method | Source | " + " | ".join(cols) + " |")
            out.append("|" + "---|" * (2 + len(cols)))
            # one line per (method, provenance); datasets spread across column groups
            keyed: dict[tuple[str, str], dict[str, ReportRow]] = {}
            for r in rows:
                keyed.setdefault((r.method, r.label), {})[r.dataset] = r
            for (method, label), by_ds in keyed.items():
                cells = []
                for d in datasets:
                    for m in metrics:
                        v = by_ds[d].get(m) if d in by_ds else None
                        cells.append(MISSING if v is None else v)
                out.append(f"| {method} | {label} | " + " | ".join(cells) + " |")
            out.append("")
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            for k, v in r.values:
                writer.writerow([r.provenance, r.task, r.method, r.dataset, k, MISSING if v is None else v])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReportTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"expected CSV header {','.join(CSV_HEADER)}")
        grouped: dict[tuple[str, str, str, str], dict[str, Optional[str]]] = {}
        for prov, task, method, dataset, metric, value in reader:
            grouped.setdefault((prov, task, method, dataset), {})[metric] = None if value == MISSING else value
        return cls([ReportRow.make(*key, vals) for key, vals in grouped.items()])

    def render(self, fmt: str = "markdown", titles: Optional[Mapping[str, str]] = None,
               names: Optional[Mapping[str, str]] = None) -> str:
        if fmt == "markdown":
            return self.to_markdown(titles, names)
        if fmt == "csv":
            return self.to_csv()
        raise ValueError(f"unknown format {fmt!r}")


def reference_document() -> dict:
    return json.loads(resources.files(__package__).joinpath(REFERENCE_FILE).read_text(encoding="utf-8"))


def reference_rows(tasks: Optional[Sequence[str]] = None) -> list[ReportRow]:
    doc = reference_document()
    rows = []
    for table in doc["tables"]:
        if tasks is not None and table["task"] not in tasks:
            continue
        for r in table["rows"]:
            rows.append(ReportRow.make(doc["provenance"], table["task"], r["method"], r["dataset"], r["values"]))
    return rows


def reference_titles() -> dict[str, str]:
    return {t["task"]: t["title"] for t in reference_document()["tables"]}


def build_table(reports: Sequence[MetricReport], include_reference: bool = True) -> ReportTable:
    """Reference rows first (all tasks), then one measured row per report."""
    rows = reference_rows() if include_reference else []
    rows += [measured_row(r) for r in reports]
    return ReportTable(rows)


def load_reports(paths: Sequence[Union[str, Path]]) -> list[MetricReport]:
    return [MetricReport.from_json(Path(p).read_text()) for p in paths]


def render_reports(paths: Sequence[Union[str, Path]], fmt: str = "markdown",
                   include_reference: bool = True) -> str:
    if not paths:
        raise ValueError("at least one report file is required")
    table = build_table(load_reports(paths), include_reference)
    return table.render(fmt, reference_titles(), reference_document()["dataset_names"])
