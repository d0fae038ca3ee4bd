"""Report figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .inference import History  # noqa: E402
from .metrics import MetricReport  # noqa: E402

# no timestamps or version strings, so reruns give identical files
_META = {"Software": None}


def plot_history(history: History, path) -> None:
    """ELBO and its two terms per epoch; validation NLL on a twin axis if present."""
    epochs = history.column("epoch")
    fig, (ax_elbo, ax_terms) = plt.subplots(1, 2, figsize=(10, 3.8))
    ax_elbo.plot(epochs, history.column("elbo"), color="tab:blue", label="ELBO")
    ax_elbo.set_xlabel("epoch")
    ax_elbo.set_ylabel("ELBO")
    val = history.column("val_nll")
    if len(val) and (val == val).any():
        twin = ax_elbo.twinx()
        twin.plot(epochs, val, color="tab:red", ls="--", label="validation NLL")
        twin.set_ylabel("validation NLL / cell")
        twin.legend(loc="center right", frameon=False)
    ax_elbo.legend(loc="lower right", frameon=False)

    ax_terms.plot(epochs, -history.column("recon"), label="-reconstruction")
    ax_terms.plot(epochs, history.column("kl"), label="KL")
    ax_terms.set_yscale("symlog")
    ax_terms.set_xlabel("epoch")
    ax_terms.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def plot_report(report: MetricReport, path) -> None:
    """Horizontal bars of every per-feature metric, one panel per metric."""
    metrics = list(dict.fromkeys(r.metric for r in report.rows))
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        rows = [r for r in report.rows if r.metric == metric]
        labels = [r.scope for r in rows]
        colors = ["0.35" if r.scope == "overall" else "tab:blue" for r in rows]
        ax.barh(range(len(rows)), [r.value for r in rows], color=colors)
        ax.set_yticks(range(len(rows)), labels)
        ax.invert_yaxis()
        ax.set_title(metric)
        for spine in ("top", "right"):
            ax.spines[spine].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
