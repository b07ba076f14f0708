"""Figures for the CLI reports. Everything renders off-screen to files."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(steps, losses, path, window: int = 10, title: str = "training loss") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        losses = np.asarray(losses, dtype=float)
        ax.plot(steps, losses, lw=0.6, alpha=0.4, label="per step")
        if losses.size >= window:
            ma = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.asarray(steps)[window - 1:], ma, lw=1.4, label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def metric_bars(metrics: dict, path, title: str = "evaluation") -> Path:
    """Grouped bars: one group per dataset, one bar per metric."""
    names = sorted(metrics)
    cols = sorted({k for m in metrics.values() for k in m})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names) * max(1, len(cols)) / 2), 3))
        width = 0.8 / max(1, len(cols))
        x = np.arange(len(names))
        for i, c in enumerate(cols):
            vals = [metrics[n].get(c, np.nan) for n in names]
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=c)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(ncol=min(4, len(cols)))
        return _save(fig, path)


def ablation_panels(rows: list, path, metric: str = "recall@20") -> Path:
    """Two panels per run label: metric and peak memory in MiB."""
    labels = [r["label"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        x = np.arange(len(labels))
        a.bar(x, [r.get(metric, np.nan) for r in rows], color="tab:blue")
        a.set_title(metric)
        b.bar(x, [r.get("peak_rss_mib", np.nan) for r in rows], color="tab:orange")
        b.set_title("peak RSS (MiB)")
        for ax in (a, b):
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=30, ha="right")
        return _save(fig, path)
