"""Text tables and plot-ready curves from finished runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from jinja2 import Environment, FileSystemLoader, StrictUndefined
from pydantic import ValidationError

from hippofusion.errors import EmptyLogError, MissingFileError, ReportFormatError
from hippofusion.harness import LOG_COLUMNS, TEST_SETS
from hippofusion.models import RunSummary, TopMeanReport

logger = logging.getLogger(__name__)

# Get project root (same level as src/)
BASE_DIR = Path(__file__).resolve().parent.parent.parent
TEMPLATES_DIR = BASE_DIR / "templates"

REQUIRED_COLUMNS = LOG_COLUMNS[:7]
CURVE_COLUMNS = ("iteration", "train_acc", "val_acc", "test0_acc", "test1_acc", "test2_acc")
METRIC_LABELS = (("acc", "ACC"), ("sen", "SEN"), ("spc", "SPC"))

environment = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)


def parse_log(path: Union[str, Path]) -> List[Dict[str, Optional[float]]]:
    """Rows of a run's ``log.csv``; empty cells become None."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"run log not found: {path}", path=str(path))
    lines = path.read_text().splitlines()
    if not lines:
        raise EmptyLogError(f"{path}: no evaluations recorded", path=str(path))
    header = lines[0].split(",")
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise ReportFormatError(f"{path}:1: missing columns {missing}", line=1, path=str(path))

    rows = []
    last_iteration = -1
    for number, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        cells = text.split(",")
        if len(cells) != len(header):
            raise ReportFormatError(
                f"{path}:{number}: expected {len(header)} fields, got {len(cells)}",
                line=number,
                path=str(path),
            )
        row: Dict[str, Optional[float]] = {}
        for column, cell in zip(header, cells):
            if cell == "":
                row[column] = None
                continue
            try:
                value = float(cell)
            except ValueError:
                raise ReportFormatError(
                    f"{path}:{number}: {column} is not a number: {cell!r}",
                    line=number,
                    path=str(path),
                ) from None
            if not math.isfinite(value):
                raise ReportFormatError(f"{path}:{number}: {column} is not finite", line=number, path=str(path))
            row[column] = value
        if row["iteration"] is None or row["iteration"] <= last_iteration:
            raise ReportFormatError(f"{path}:{number}: iterations must increase", line=number, path=str(path))
        last_iteration = row["iteration"]
        rows.append(row)
    if not rows:
        raise EmptyLogError(f"{path}: no evaluations recorded", path=str(path))
    return rows


def load_summary(path: Union[str, Path]) -> RunSummary:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"run summary not found: {path}", path=str(path))
    try:
        return RunSummary.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise ReportFormatError(f"{path}: {exc.errors()[0]['msg']}", line=1, path=str(path)) from None


def format_cell(report: Optional[TopMeanReport]) -> str:
    if report is None:
        return "n/a"
    return f"{report.value:.3f} ± {report.half_width:.3f}"


@dataclass
class RunRecord:
    name: str
    summary: RunSummary
    rows: List[Dict[str, Optional[float]]]

    @property
    def sort_key(self):
        s = self.summary
        return (s.classifier_pair, s.input_mode, s.roi_size, s.architecture, self.name)

    def cells(self) -> List[str]:
        return [
            format_cell(self.summary.top_mean[name][metric])
            for name in TEST_SETS
            for metric, _ in METRIC_LABELS
        ]


def find_runs(paths: Sequence[Union[str, Path]]) -> List[Path]:
    """Run directories: the paths themselves or any directory below them holding a log.csv."""
    found = set()
    for p in map(Path, paths):
        if (p / "log.csv").exists() or p.name == "log.csv":
            found.add(p if p.is_dir() else p.parent)
            continue
        if not p.exists():
            raise MissingFileError(f"no such run directory: {p}", path=str(p))
        found.update(log.parent for log in p.rglob("log.csv"))
    if not found:
        raise EmptyLogError(f"no run logs under {', '.join(map(str, paths))}")
    return sorted(found)


def load_runs(paths: Sequence[Union[str, Path]]) -> List[RunRecord]:
    records = []
    for run_dir in find_runs(paths):
        rows = parse_log(run_dir / "log.csv")
        summary = load_summary(run_dir / "summary.json")
        records.append(RunRecord(run_dir.name, summary, rows))
    return sorted(records, key=lambda r: r.sort_key)


def _pad(cells: Sequence[str], widths: Sequence[int]) -> str:
    return "  ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()


def render_table(records: Sequence[RunRecord]) -> str:
    header = ["pair", "used data", "ROI", "config"] + [
        f"{name} {label}" for name in TEST_SETS for _, label in METRIC_LABELS
    ]
    body = [
        [r.summary.classifier_pair, r.summary.input_mode, str(r.summary.roi_size), r.summary.architecture] + r.cells()
        for r in records
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    template = environment.get_template("report.txt.j2")
    return template.render(
        header=_pad(header, widths),
        rule="  ".join("-" * w for w in widths),
        rows=[_pad(row, widths) for row in body],
        interval=records[0].summary.top_mean["test0"]["acc"].interval
        if records and records[0].summary.top_mean["test0"]["acc"]
        else "wald",
        window=records[0].summary.window_points if records else 0,
    )


def curve_csv(record: RunRecord) -> str:
    lines = [",".join(CURVE_COLUMNS)]
    for row in record.rows:
        values = []
        for column in CURVE_COLUMNS:
            value = row.get(column)
            if value is None:
                values.append("")
            elif column == "iteration":
                values.append(str(int(value)))
            else:
                values.append(format(value, ".17g"))
        lines.append(",".join(values))
    return "\n".join(lines) + "\n"


def write_report(
    paths: Sequence[Union[str, Path]],
    out_dir: Optional[Union[str, Path]] = None,
) -> str:
    """Render the table; with ``out_dir`` also write report.txt and curves/<run>.csv."""
    records = load_runs(paths)
    table = render_table(records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "curves").mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(table)
        for record in records:
            (out_dir / "curves" / f"{record.name}.csv").write_text(curve_csv(record))
        logger.info(f"Wrote report for {len(records)} runs to {out_dir}")
    return table


def summary_json(records: Sequence[RunRecord]) -> str:
    payload = {r.name: r.summary.model_dump(mode="json") for r in records}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
