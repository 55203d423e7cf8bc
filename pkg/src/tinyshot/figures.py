"""Matplotlib renderings for the CLI report paths (files only, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .planner import LayoutReport


def save_loss_curves(result, path) -> None:
    """Total loss plus per-term breakdown over training steps."""
    steps = range(len(result.loss_history))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, result.loss_history, label="total", linewidth=2, color="black")
    for key, color in (("contrastive", "tab:blue"), ("embedding", "tab:orange"),
                       ("matryoshka", "tab:green")):
        ax.plot(steps, [b[key] for b in result.breakdown_history],
                label=key, linewidth=1, alpha=0.8, color=color)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"toy distillation run (seed {result.config.seed})")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


_ITEM_COLORS = {
    "weights": "tab:blue",
    "embeddings": "tab:orange",
    "activations": "tab:green",
    "io": "tab:red",
}


def save_memory_layout(report: LayoutReport, path) -> None:
    """One horizontal bar per region: stacked placements plus free space."""
    regions = list(report.platform.regions().items())
    fig, ax = plt.subplots(figsize=(8, 1.2 + 0.9 * len(regions)))
    labels_seen = set()
    for row, (region, cap) in enumerate(regions):
        left = 0
        for p in report.placements:
            if p.region != region or p.size_bytes == 0:
                continue
            label = p.item if p.item not in labels_seen else None
            labels_seen.add(p.item)
            ax.barh(row, p.size_bytes / 1024, left=left / 1024, height=0.6,
                    color=_ITEM_COLORS.get(p.item, "gray"), label=label)
            left += p.size_bytes
        ax.barh(row, (cap - left) / 1024, left=left / 1024, height=0.6,
                color="0.9", edgecolor="0.6",
                label="free" if "free" not in labels_seen else None)
        labels_seen.add("free")
    ax.set_yticks(range(len(regions)))
    ax.set_yticklabels(f"{r} ({cap // 1024} KB)" for r, cap in regions)
    ax.set_xlabel("KB")
    title = f"memory layout on {report.platform.name}"
    if not report.feasible:
        title += "  [INFEASIBLE: " + ", ".join(report.violations) + "]"
    ax.set_title(title)
    ax.legend(frameon=False, loc="lower right", ncol=5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_scaling(rows: list[dict], path) -> None:
    """Multiply counts of quadratic vs linear attention across lengths."""
    ns = [r["n"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.plot(ns, [r["naive_multiplies"] for r in rows], "o-", label="quadratic")
    ax.plot(ns, [r["linear_multiplies"] for r in rows], "s-", label="linear")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("sequence length N")
    ax.set_ylabel("scalar multiplies")
    ax.set_title(f"attention cost scaling (d = {rows[0]['d']})")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
