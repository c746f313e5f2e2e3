"""Figure rendering for finished runs.

Figures are derived strictly from the delimited files, never from live run
state, so plotting a run later (or on another machine) gives the same
pictures. The Agg backend is forced because runs happen headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import metrics


def _domain_boundaries(batch_rows):
    bounds = []
    for prev, cur in zip(batch_rows, batch_rows[1:]):
        if cur["domain_id"] != prev["domain_id"]:
            bounds.append(cur["batch_index"])
    return bounds


def _style(ax, title, xlabel, ylabel):
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)


def _mark_events(ax, batch_rows):
    for b in _domain_boundaries(batch_rows):
        ax.axvline(b, color="gray", linestyle="--", linewidth=0.8)
    shifts = [r["batch_index"] for r in batch_rows if r["shift_detected"]]
    for i, b in enumerate(shifts):
        ax.axvline(b, color="tab:red", linestyle=":", linewidth=1.0,
                   label="shift detected" if i == 0 else None)


def render_losses(run_dir, out_path):
    rows = metrics.read_batches(run_dir)
    x = [r["batch_index"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(x, [r["l_da"] for r in rows], label="alignment loss", linewidth=1.2)
    ax.plot(x, [r["l_em"] for r in rows], label="entropy loss", linewidth=1.2)
    _mark_events(ax, rows)
    _style(ax, "Losses over the stream", "batch", "loss")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_accuracy(run_dir, out_path, window=10):
    rows = metrics.read_batches(run_dir)
    x = [r["batch_index"] for r in rows]
    acc = [100.0 * r["n_correct"] / r["n_samples"] if r["n_samples"] else 0.0 for r in rows]
    rolling = [
        sum(acc[max(0, i - window + 1) : i + 1]) / len(acc[max(0, i - window + 1) : i + 1])
        for i in range(len(acc))
    ]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(x, acc, color="tab:blue", alpha=0.35, linewidth=0.9, label="per batch")
    ax.plot(x, rolling, color="tab:blue", linewidth=1.6, label=f"rolling mean ({window})")
    _mark_events(ax, rows)
    _style(ax, "Batch accuracy over the stream", "batch", "accuracy (%)")
    ax.set_ylim(0, 101)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_domain_errors(run_dir, out_path):
    rows = metrics.read_domains(run_dir)
    labels = [f"d{r['domain_id']}\n{r['kind']}@{r['severity']}" for r in rows]
    errors = [r["error_rate"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.3 * len(rows) + 2), 4.0))
    ax.bar(range(len(rows)), errors, color="tab:orange", width=0.6)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=9)
    for i, e in enumerate(errors):
        ax.annotate(f"{e:.1f}", (i, e), ha="center", va="bottom", fontsize=9)
    _style(ax, "Error rate per domain", "", "error (%)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_run(run_dir, out_dir=None):
    """All per-run figures; returns the written paths."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    return [
        render_losses(run_dir, os.path.join(out_dir, "losses.png")),
        render_accuracy(run_dir, os.path.join(out_dir, "accuracy.png")),
        render_domain_errors(run_dir, os.path.join(out_dir, "domain_errors.png")),
    ]


def render_comparison(header, table, out_path):
    """Grouped bars: per-domain error for each run side by side."""
    n_domains = len(header) - 4  # run, variant, ordering ... mean
    fig, ax = plt.subplots(figsize=(max(5.0, 1.8 * (n_domains + 1) + 2), 4.5))
    group_width = 0.8
    bar_width = group_width / len(table)
    for j, row in enumerate(table):
        values = row[3:]
        positions = [i + j * bar_width - group_width / 2 + bar_width / 2 for i in range(len(values))]
        ax.bar(positions, values, width=bar_width * 0.95, label=f"{row[0]} ({row[1]})")
    ax.set_xticks(range(n_domains + 1))
    ax.set_xticklabels(header[3:], fontsize=9)
    _style(ax, "Error rate by domain and run", "", "error (%)")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
