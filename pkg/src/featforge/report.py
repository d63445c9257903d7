"""Run reports: a markdown summary, a per-feature metrics CSV, and rendered
figures (score trace, feature diagnostics, cost breakdown) written next to
the trial log."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .costmodel import CostBreakdown, CostReconciliation
from .optimizer import OptimizeResult, TrialRecord

FIGURE_DPI = 120


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)


def plot_score_trace(trials: Sequence[TrialRecord], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ok = [t for t in trials if t.status == "ok"]
    aborted = [t for t in trials if t.status != "ok"]
    if ok:
        ax.plot([t.index for t in ok], [t.combined_score for t in ok], "o-", label="combined")
        ax.plot([t.index for t in ok], [t.f1_score for t in ok], "s--", alpha=0.7, label="macro F1")
        ax.plot(
            [t.index for t in ok],
            [t.interpretability_score for t in ok],
            "^--",
            alpha=0.7,
            label="interpretability",
        )
        best = max(ok, key=lambda t: (t.combined_score, -t.index))
        ax.axhline(best.combined_score, color="gray", lw=0.8, ls=":")
    if aborted:
        ax.plot([t.index for t in aborted], [0.0] * len(aborted), "x", color="red", label="aborted")
    ax.set_xlabel("trial")
    ax.set_ylabel("score")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("optimization trace")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_feature_metrics(best: TrialRecord, path: Path) -> None:
    per = best.metrics.per_feature if best.metrics else {}
    names = list(per)
    fig, axes = plt.subplots(1, 3, figsize=(10, 0.6 + 0.45 * max(len(names), 3)), sharey=True)
    y = range(len(names))
    panels = (
        ("SHAP importance", [per[n].shap_importance for n in names]),
        ("mutual information (nats)", [per[n].mutual_information for n in names]),
        ("coverage", [per[n].coverage for n in names]),
    )
    colors = ["#d62728" if per[n].leakage_flag else "#1f77b4" for n in names]
    for ax, (title, values) in zip(axes, panels):
        ax.barh(list(y), values, color=colors)
        ax.set_title(title, fontsize=9)
        ax.invert_yaxis()
    axes[0].set_yticks(list(y))
    axes[0].set_yticklabels(names, fontsize=8)
    fig.suptitle("per-feature diagnostics (red = leakage-flagged)", fontsize=10)
    _save(fig, path)


def plot_cost(
    breakdown: CostBreakdown, reconciliation: CostReconciliation, path: Path
) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    terms = ("propose", "extract", "score")
    predicted = [breakdown.propose_term, breakdown.extract_term, breakdown.score_term]
    ax1.bar(terms, predicted, color="#1f77b4")
    ax1.set_title("predicted cost per evaluation", fontsize=9)
    ax1.set_ylabel("LM-primitive units")
    if reconciliation.has_data and reconciliation.tokens_by_term:
        measured = [reconciliation.tokens_by_term[t] for t in terms]
        ax2.bar(terms, measured, color="#2ca02c")
        ax2.set_title("measured tokens", fontsize=9)
    else:
        ax2.text(0.5, 0.5, "no ledger data", ha="center", va="center")
        ax2.set_axis_off()
    _save(fig, path)


def write_metrics_csv(best: TrialRecord, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["feature", "shap_importance", "mutual_information", "coverage", "leakage_flag", "leakage_reasons"]
        )
        if best.metrics:
            for name, m in best.metrics.per_feature.items():
                writer.writerow(
                    [
                        name,
                        f"{m.shap_importance:.6f}",
                        f"{m.mutual_information:.6f}",
                        f"{m.coverage:.4f}",
                        str(m.leakage_flag).lower(),
                        ";".join(m.leakage_reasons),
                    ]
                )


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def write_report(
    run_path: Path,
    result: OptimizeResult,
    config_doc: dict,
    breakdown: CostBreakdown,
    reconciliation: CostReconciliation,
) -> None:
    """Render report.md plus its figures and the metrics CSV into run_path."""
    figures = run_path / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    best = result.best

    plot_score_trace(result.trials, figures / "score_trace.png")
    if best is not None:
        plot_feature_metrics(best, figures / "feature_metrics.png")
        write_metrics_csv(best, run_path / "metrics.csv")
    plot_cost(breakdown, reconciliation, figures / "cost_breakdown.png")

    ok = [t for t in result.trials if t.status == "ok"]
    lines = ["# Optimization report", ""]
    lines += [
        f"- trials: {len(result.trials)} ({len(ok)} ok, {len(result.trials) - len(ok)} aborted)",
        f"- instruction pool: {len(result.space.instructions)}",
        f"- example sets: {len(result.space.example_sets)}",
        f"- seed: {config_doc.get('seed')}",
        f"- proposer mode: {config_doc.get('proposer_mode')}",
        f"- lambda: {config_doc.get('lambda')}",
        "",
    ]
    if best is None:
        lines += ["**No trial completed successfully.**", ""]
    else:
        lines += [
            "## Best candidate",
            "",
            f"- trial {best.index}: instruction {best.candidate.instruction_id} "
            f"x example set {best.candidate.example_set_id}",
            f"- combined score: {_fmt(best.combined_score)} "
            f"(macro F1 {_fmt(best.f1_score)}, interpretability {_fmt(best.interpretability_score)})",
            f"- instruction: {best.instruction_text}",
            "",
            "![optimization trace](figures/score_trace.png)",
            "",
            "## Feature diagnostics",
            "",
            "| feature | SHAP | MI (nats) | coverage | leakage |",
            "|---|---|---|---|---|",
        ]
        if best.metrics:
            for name, m in best.metrics.per_feature.items():
                leak = ", ".join(m.leakage_reasons) if m.leakage_flag else "no"
                lines.append(
                    f"| {name} | {m.shap_importance:.4f} | {m.mutual_information:.4f} "
                    f"| {m.coverage:.2f} | {leak} |"
                )
        lines += [
            "",
            "![feature diagnostics](figures/feature_metrics.png)",
            "",
            "Raw values: [metrics.csv](metrics.csv)",
            "",
        ]
    lines += [
        "## Cost",
        "",
        f"- predicted per-evaluation cost: propose {breakdown.propose_term:.0f}, "
        f"extract {breakdown.extract_term:.0f}, score {breakdown.score_term:.0f} "
        f"(dominant: {breakdown.dominant})",
        f"- predicted run total: {breakdown.run_total:.0f} LM-primitive units",
    ]
    if reconciliation.has_data:
        agree = "agrees with" if reconciliation.agreement else "DISAGREES with"
        lines += [
            f"- measured extractor token share: {reconciliation.extractor_token_share:.3f}",
            f"- measured dominant role ({reconciliation.measured_dominant}) {agree} the prediction",
        ]
    else:
        lines.append("- no measured ledger data")
    lines += ["", "![cost breakdown](figures/cost_breakdown.png)", ""]
    (run_path / "report.md").write_text("\n".join(lines), encoding="utf-8")


def write_comparison(out_path: Path, runs: Sequence[dict]) -> None:
    """Side-by-side comparison of two finished runs (reflective vs scalar
    feedback): a markdown table plus a grouped bar figure."""
    out_path.mkdir(parents=True, exist_ok=True)
    figures = out_path / "figures"
    figures.mkdir(exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    measures = ("combined", "macro F1", "interpretability")
    width = 0.38
    for k, run in enumerate(runs):
        values = [run["combined_score"], run["f1_score"], run["interpretability_score"]]
        xs = [i + (k - 0.5) * width for i in range(len(measures))]
        ax.bar(xs, values, width=width, label=run["mode"])
    ax.set_xticks(range(len(measures)))
    ax.set_xticklabels(measures)
    ax.set_ylim(0, 1.05)
    ax.set_title("best candidate by proposer mode")
    ax.legend(fontsize=8)
    _save(fig, figures / "mode_comparison.png")

    lines = [
        "# Proposer-mode comparison",
        "",
        "| mode | run | combined | macro F1 | interpretability | trials ok |",
        "|---|---|---|---|---|---|",
    ]
    for run in runs:
        lines.append(
            f"| {run['mode']} | {run['run_dir']} | {_fmt(run['combined_score'])} "
            f"| {_fmt(run['f1_score'])} | {_fmt(run['interpretability_score'])} "
            f"| {run['ok_trials']}/{run['trials']} |"
        )
    lines += ["", "![mode comparison](figures/mode_comparison.png)", ""]
    if len({run["mode"] for run in runs}) < 2:
        lines.append("Note: both runs used the same proposer mode.")
    (out_path / "comparison.md").write_text("\n".join(lines), encoding="utf-8")
