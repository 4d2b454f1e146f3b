"""Figure rendering for report output: loss curves, sweep curves, bars.

Everything renders through the Agg backend straight to files; no display
is ever opened. These are companions to the delimited records, not a
replacement, so each function takes already-computed results.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curve(losses, path, title: str = "reconstruction loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(losses) + 1), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(report, path) -> None:
    """Train/validation loss plus validation accuracy for one plugin run."""
    epochs = [r.epoch for r in report.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.train_loss for r in report.records], label="train loss")
    ax.plot(epochs, [r.val_loss for r in report.records], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_acc for r in report.records], color="tab:green",
             linestyle="--", label="val accuracy")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0.0, 1.05)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    ax.set_title(f"{report.plugin_id} v{report.version} ({report.stop_reason})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curves(result, path) -> None:
    """Novel/known accuracy against incremental sample count."""
    ns = [row.n for row in result.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [row.novel_accuracy for row in result.rows], marker="o",
            label="novel-class accuracy")
    ax.plot(ns, [row.known_accuracy for row in result.rows], marker="s",
            label="known-class accuracy")
    ax.axhline(result.baseline_known_accuracy, color="gray", linestyle=":",
               label="known baseline (pre-update)")
    ax.set_xlabel("labeled novel cells")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(ns)
    ax.legend(fontsize=8)
    ax.set_title("incremental learning sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_f1_bars(report, path, vocab=None) -> None:
    """Per-class F1 bars; tissue-level weighted F1 appended when present."""
    name = (lambda c: vocab.cell_type_name(c)) if vocab else str
    labels = [name(c) for c in report.per_class]
    values = [m.f1 for m in report.per_class.values()]
    colors = ["tab:blue"] * len(labels)
    for t, wf1 in sorted(report.per_tissue.items()):
        labels.append("tissue " + (vocab.tissue_name(t) if vocab else str(t)))
        values.append(wf1)
        colors.append("tab:orange")
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(labels)), 4))
    ax.bar(range(len(labels)), values, color=colors)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("F1")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"per-class F1 (accuracy {report.accuracy:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_count_bars(counts: dict, path, title: str) -> None:
    keys = list(counts)
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(keys)), 4))
    ax.bar(range(len(keys)), [counts[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels([str(k) for k in keys], rotation=30, ha="right")
    ax.set_ylabel("cells")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
