"""Figure rendering for training logs and evaluation reports."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_loss_log(path):
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


def plot_loss_curve(records, out_path):
    """Total loss plus per-term curves over iterations."""
    if not records:
        raise ValueError("loss log is empty")
    iters = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, style in (("total", "-"), ("fl", "--"), ("sl1", "--"),
                       ("pull", ":"), ("push", ":")):
        ax.plot(iters, [r[key] for r in records], style, label=key, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_cdr_curve(cdr_by_size, out_path, label="CDR"):
    """Input-size robustness curve: CDR versus evaluation size."""
    if not cdr_by_size:
        raise ValueError("no per-size results to plot")
    sizes = sorted(int(k) for k in cdr_by_size)
    vals = [cdr_by_size[s] if s in cdr_by_size else cdr_by_size[str(s)] for s in sizes]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(sizes, vals, "o-")
    ax.set_xlabel("input size (px)")
    ax.set_ylabel(f"{label} (%)")
    ax.set_ylim(0, 101)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def plot_ablation(labels, cdrs, out_path, xlabel="setting"):
    """Bar chart of CDR per ablation point."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(v) for v in labels], cdrs, color="steelblue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("CDR (%)")
    ax.set_ylim(0, 101)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)
