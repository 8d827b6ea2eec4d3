"""Report writers: metrics.csv, suite.json, summary.md."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import astuple
from pathlib import Path

from .errors import ConfigurationError
from .harness import METRICS_COLUMNS, FULL_CELL, MetricsRow, SuiteReport


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def _pct(value) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def summary_markdown(report: SuiteReport) -> str:
    agg = report.aggregates()
    frozen = agg["median_d_A_frozen_init"]
    lines = [
        "# Suite summary",
        "",
        f"Seeds: {', '.join(str(s) for s in report.seeds)}",
        "",
        "| cell | median target acc (%) | median d_A (adapted) | ok | failed |",
        "|---|---|---|---|---|",
    ]
    for cell, stats in agg["cells"].items():
        d_a = stats["median_d_A_adapted"]
        lines.append(
            f"| {cell} | {_pct(stats['median_target_acc'])} | "
            f"{'n/a' if d_a is None else f'{d_a:.4f}'} | {stats['n_ok']} | {stats['n_failed']} |"
        )
    lines += [
        "",
        f"Median d_A on frozen initial features: {'n/a' if frozen is None else f'{frozen:.4f}'}",
    ]
    if FULL_CELL in agg["cells"]:
        d_full = agg["cells"][FULL_CELL]["median_d_A_adapted"]
        lines.append(f"Median d_A after TransPar-DANN training: {'n/a' if d_full is None else f'{d_full:.4f}'}")
    return "\n".join(lines) + "\n"


def emit_reports(report: SuiteReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out / "metrics.csv",
            "suite": out / "suite.json",
            "summary": out / "summary.md",
        }
        paths["metrics"].write_text(metrics_csv(report.metrics))
        paths["suite"].write_text(json.dumps(report.aggregates(), sort_keys=True, indent=2) + "\n")
        paths["summary"].write_text(summary_markdown(report))
    except OSError as exc:
        raise ConfigurationError(f"cannot write reports to {out}: {exc}") from None
    return paths
