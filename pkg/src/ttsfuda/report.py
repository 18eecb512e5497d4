"""Comparison tables and bar plots over evaluation reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .exceptions import ConfigError
from .metrics import EvalReport

DIRECT = "direct"
ORACLE = "oracle"


def _row_kind(report: EvalReport) -> str:
    mode = str(report.meta.get("mode", ""))
    if mode == DIRECT:
        return DIRECT
    if mode == ORACLE:
        return ORACLE
    return "adapted"


def _label(report: EvalReport) -> str:
    label = str(report.meta.get("mode") or report.meta.get("model") or "report")
    tag = report.meta.get("tag")
    return f"{label} [{tag}]" if tag else label


def _sort_key(report: EvalReport):
    order = {DIRECT: 0, "adapted": 1, ORACLE: 2}
    return order[_row_kind(report)], _label(report)


def comparison_rows(reports: Sequence[EvalReport]) -> List[Dict[str, object]]:
    """One row per report: direct testing first, adapted modes by name, oracle last.

    Adapted rows carry their difference to the direct-testing row and, when
    present, to the oracle row for every metric key.
    """
    if not reports:
        raise ConfigError("report needs at least one evaluation report")
    datasets = {str(r.meta.get("dataset", "?")) for r in reports}
    if len(datasets) > 1:
        raise ConfigError(f"reports come from different datasets: {sorted(datasets)}")
    keys = list(reports[0].aggregate)
    for r in reports[1:]:
        if list(r.aggregate) != keys:
            raise ConfigError(f"reports disagree on metric keys: {keys} vs {list(r.aggregate)}")
    ordered = sorted(reports, key=_sort_key)
    direct = next((r for r in ordered if _row_kind(r) == DIRECT), None)
    oracle = next((r for r in ordered if _row_kind(r) == ORACLE), None)
    dataset = datasets.pop()
    rows = []
    for r in ordered:
        row = {"row": _label(r), "kind": _row_kind(r), "dataset": dataset}
        for k in keys:
            row[k] = r.mean(k)
            row[f"{k}_std"] = r.aggregate[k].get("std", 0.0)
            if direct is not None:
                row[f"{k}_vs_direct"] = r.mean(k) - direct.mean(k)
            if oracle is not None:
                row[f"{k}_vs_oracle"] = r.mean(k) - oracle.mean(k)
        rows.append(row)
    return rows


def _columns(rows):
    return [c for c in rows[0] if c != "kind"]


def _fmt_cell(col, value):
    if isinstance(value, float):
        return f"{value:+.4f}" if "_vs_" in col else f"{value:.4f}"
    return str(value)


def to_markdown(rows) -> str:
    cols = _columns(rows)
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_fmt_cell(c, row.get(c, "")) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def to_csv(rows) -> str:
    cols = _columns(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt_cell(c, row.get(c, "")) for c in cols])
    return buf.getvalue()


def bar_plot(rows, path, title: Optional[str] = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = [c[:-4] for c in _columns(rows) if c.endswith("_std")]
    width = 0.8 / max(len(keys), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 3.2))
    for j, k in enumerate(keys):
        xs = [i + (j - (len(keys) - 1) / 2) * width for i in range(len(rows))]
        ax.bar(xs, [r[k] for r in rows], width, yerr=[r[f"{k}_std"] for r in rows], label=k, capsize=2)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["row"] for r in rows], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.set_title(title or str(rows[0]["dataset"]), fontsize=9)
    if len(keys) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_report(reports: Sequence[EvalReport], out_dir, stem: str = "comparison") -> Dict[str, Path]:
    """Write ``<stem>.md``, ``<stem>.csv`` and ``<stem>_<dataset>.png`` under ``out_dir``."""
    rows = comparison_rows(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md = out / f"{stem}.md"
    md.write_text(to_markdown(rows))
    table = out / f"{stem}.csv"
    table.write_text(to_csv(rows))
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(rows[0]["dataset"]))
    png = bar_plot(rows, out / f"{stem}_{safe}.png")
    return {"markdown": md, "csv": table, "plot": png}
