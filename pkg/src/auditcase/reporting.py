"""Figures and delimited tables for run reports, evaluation scores and label tables."""

from __future__ import annotations

import csv
from collections import Counter
from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from auditcase.checkeval import CorrelationResult, EvalScores, MetricStats  # noqa: E402
from auditcase.pipeline import RunReport  # noqa: E402
from auditcase.validation import LABEL_COLUMNS, ValidationRecord  # noqa: E402

METRICS = ("precision", "recall", "f1")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_score_distribution(scores: Sequence[EvalScores], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    data = [[getattr(s, m) for s in scores] for m in METRICS]
    ax.boxplot(data)
    ax.set_xticks([1, 2, 3], [m.capitalize() for m in METRICS])
    for i, values in enumerate(data, start=1):
        ax.scatter([i] * len(values), values, s=12, alpha=0.6, color="tab:blue")
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"Check-eval scores (n={len(scores)})")
    return _save(fig, Path(path))


def write_stats_csv(stats: Mapping[str, MetricStats], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", *stats.keys()])
        for stat in ("mean", "std", "min", "max"):
            w.writerow([stat, *(f"{getattr(s, stat):.6f}" for s in stats.values())])
    return path


def write_scores_csv(names: Sequence[str], scores: Sequence[EvalScores], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", *METRICS])
        for name, s in zip(names, scores):
            w.writerow([name, *(f"{getattr(s, m):.6f}" for m in METRICS)])
    return path


def plot_correlations(results: Mapping[str, CorrelationResult], path: str | Path) -> Path:
    dims = list(results)
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(dims) + 2), 4))
    xs = range(len(dims))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [results[d].spearman_rho for d in dims], width, label="Spearman ρ")
    ax.bar([x + width / 2 for x in xs], [results[d].kendall_tau for d in dims], width, label="Kendall τ")
    ax.set_xticks(list(xs), dims)
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_ylim(-1.05, 1.05)
    ax.set_ylabel("correlation with human scores")
    ax.legend()
    return _save(fig, Path(path))


def write_correlations_csv(results: Mapping[str, CorrelationResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dimension", "spearman_rho", "kendall_tau", "n"])
        for dim, r in results.items():
            w.writerow([dim, f"{r.spearman_rho:.6f}", f"{r.kendall_tau:.6f}", r.n])
    return path


def plot_stage_costs(report: RunReport, path: str | Path) -> Path:
    stages = [s.stage for s in report.stages]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.barh(stages, [s.duration_s for s in report.stages], color="tab:blue")
    ax1.set_xlabel("duration (s)")
    ax1.invert_yaxis()
    ax2.barh(stages, [s.tokens_in for s in report.stages], label="prompt", color="tab:orange")
    ax2.barh(stages, [s.tokens_out for s in report.stages],
             left=[s.tokens_in for s in report.stages], label="completion", color="tab:green")
    ax2.set_xlabel("tokens")
    ax2.invert_yaxis()
    ax2.legend()
    fig.suptitle(f"Case {report.case_id}: {report.total_duration_s:.2f} s total")
    return _save(fig, Path(path))


def write_stage_csv(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "status", "duration_s", "requests", "tokens_in", "tokens_out", "estimated_cost"])
        for s in report.stages:
            w.writerow([s.stage, s.status, f"{s.duration_s:.4f}", s.requests, s.tokens_in, s.tokens_out,
                        f"{s.estimated_cost:.6f}"])
    return path


def plot_label_distribution(records: Sequence[ValidationRecord], path: str | Path) -> Path:
    columns = LABEL_COLUMNS[1:]
    counts = {c: Counter() for c in columns}
    for rec in records:
        row = rec.label_row()
        for c in columns:
            counts[c][row[c] or "missing"] += 1
    values = sorted({v for c in counts.values() for v in c})
    fig, ax = plt.subplots(figsize=(9, 4.5))
    bottom = [0] * len(columns)
    for v in values:
        heights = [counts[c][v] for c in columns]
        ax.bar(columns, heights, bottom=bottom, label=v)
        bottom = [b + h for b, h in zip(bottom, heights)]
    ax.set_ylabel("instructions")
    ax.set_title(f"Label distribution over {len(records)} instructions")
    ax.tick_params(axis="x", rotation=30)
    ax.legend(fontsize="small", ncols=2)
    return _save(fig, Path(path))
