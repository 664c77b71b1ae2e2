"""Report files: JSON evaluation reports, a TSV sweep table and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from .evaluation import EvalReport

SWEEP_COLUMNS = ("method", "k", "t", "seed", "mean_recall", "mean_count", "mean_pre_count", "n", "failures",
                 "config_hash", "judge")


def write_report(report: EvalReport, path: str | Path, run_config_hash: str = "") -> None:
    rec = report.to_record()
    if run_config_hash:
        rec["run_config_hash"] = run_config_hash
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sweep_rows(reports: Sequence[EvalReport]) -> list[dict]:
    rows = []
    for r in reports:
        rows.append({
            "method": r.method,
            "k": r.params.get("k"),
            "t": r.params.get("t"),
            "seed": r.params.get("seed"),
            "mean_recall": r.mean_recall,
            "mean_count": r.mean_count,
            "mean_pre_count": r.mean_pre_count,
            "n": len(r.completed),
            "failures": r.failures,
            "config_hash": r.config_hash,
            "judge": r.judge,
        })
    return rows


def write_sweep_table(reports: Sequence[EvalReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for row in sweep_rows(reports):
            w.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)) for k, v in row.items()})


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(reports: Sequence[EvalReport], out_dir: str | Path) -> list[Path]:
    """Recall-vs-parameter line plots, one figure per swept axis (``k``, ``t``).

    An axis is plotted only for methods that take more than one value on it.
    """
    out_dir = Path(out_dir)
    rows = [r for r in sweep_rows(reports) if r["mean_recall"] is not None]
    written = []
    labels = {"k": "requested questions (k)", "t": "in-context examples (t)"}
    for axis in ("k", "t"):
        series: dict[str, dict] = {}
        for r in rows:
            if r[axis] is None:
                continue
            series.setdefault(r["method"], {}).setdefault(r[axis], []).append(r["mean_recall"])
        series = {m: pts for m, pts in series.items() if len(pts) > 1}
        if not series:
            continue
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for method, pts in sorted(series.items()):
            xs = sorted(pts)
            ys = [sum(pts[x]) / len(pts[x]) for x in xs]
            ax.plot(xs, ys, marker="o", label=method)
        ax.set_xlabel(labels[axis])
        ax.set_ylabel("weighted recall")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"sweep_{axis}.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def plot_themes(report: EvalReport, path: str | Path) -> Path | None:
    themes = report.per_theme()
    if not themes:
        return None
    plt = _pyplot()
    names = list(themes)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(names)), 3.2))
    ax.bar(range(len(names)), [themes[n]["recall"] for n in names], color="#4c72b0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("weighted recall")
    ax.set_ylim(0, 1.02)
    ax.set_title(report.method, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
