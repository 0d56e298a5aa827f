"""Static convergence figure written next to the simulation CSV."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def convergence_figure(summaries: Sequence, path, title: str = "") -> Path:
    """Plot ``n Tr(W V)`` with bootstrap error bars against ``n``, plus the target bound."""
    path = Path(path)
    ns = [s.n for s in summaries]
    vals = [s.n_tr_WV for s in summaries]
    errs = [s.n_tr_WV_stderr for s in summaries]
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.errorbar(ns, vals, yerr=errs, marker="o", capsize=3, label=r"$n\,\mathrm{Tr}(W\hat V)$")
    if summaries:
        target = summaries[0].target_bound
        ax.axhline(target, color="k", linestyle="--", linewidth=1, label="target")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("copies n")
    ax.set_ylabel("scaled weighted MSE")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
